use minirec_autodiff::gradcheck::{max_relative_error, numeric_input_grad, numeric_param_grads};
use minirec_autodiff::{AutodiffError, Graph, ParamId, ParamStore, Result, Segment, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FD_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Checks d(loss)/d(x) for a single free input against central differences.
fn check_input<F>(x: Tensor, build: F)
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let v = g.input(x.clone()).unwrap();
    let loss = build(&mut g, v).unwrap();
    let grads = g.backward(loss).unwrap();
    let analytic = grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
    let numeric = numeric_input_grad(&x, FD_STEP, |xp| {
        let mut g = Graph::new();
        let v = g.input(xp.clone())?;
        let l = build(&mut g, v)?;
        Ok(g.value(l).item())
    })
    .unwrap();
    let err = max_relative_error(&[analytic], &[numeric]);
    assert!(err < TOL, "relative error {err}");
}

/// Reduces any tensor to a scalar with a fixed random projection so that
/// every output element contributes a distinct weight.
fn project(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
    let shape = g.value(v).shape().to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut rng(seed)))?;
    let p = g.mul(v, w)?;
    g.sum(p)
}

#[test]
fn matmul_by_identity_is_identity() {
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng(1));
    let mut g = Graph::new();
    let av = g.constant(a.clone()).unwrap();
    let i = g.constant(Tensor::identity(4)).unwrap();
    let out = g.matmul(av, i).unwrap();
    assert_eq!(g.value(out), &a);
}

#[test]
fn uniform_logits_cross_entropy_is_ln_v() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::full(&[1, 8], 0.3)).unwrap();
    let l = g.cross_entropy(z, &[5], &[1.0]).unwrap();
    assert!((g.value(l).item() - 8f64.ln()).abs() < 1e-12);
    assert!((8f64.ln() - 2.0794).abs() < 1e-4);
}

#[test]
fn squared_error_of_identical_tensors_is_zero() {
    let x = Tensor::randn(&[5, 3], 1.0, &mut rng(2));
    let mut g = Graph::new();
    let a = g.constant(x.clone()).unwrap();
    let b = g.constant(x).unwrap();
    let l = g.squared_error(a, b).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
}

#[test]
fn gradient_of_sum_is_all_ones() {
    let mut store = ParamStore::new();
    let w = store.add("w", Tensor::randn(&[4, 3], 1.0, &mut rng(3)), false);
    let unused = store.add("unused", Tensor::randn(&[2], 1.0, &mut rng(4)), false);
    let mut g = Graph::new();
    let wv = g.param(&store, w).unwrap();
    let l = g.sum(wv).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.param(w).unwrap(), &Tensor::full(&[4, 3], 1.0));
    assert!(grads.param(unused).is_none());
    assert_eq!(grads.param_or_zeros(unused, &store), Tensor::zeros(&[2]));
}

#[test]
fn detached_branch_receives_no_gradient() {
    let x = Tensor::randn(&[3], 1.0, &mut rng(5));
    let mut g = Graph::new();
    let v = g.input(x).unwrap();
    let d = g.detach(v).unwrap();
    let sq = g.mul(d, d).unwrap();
    let l = g.sum(sq).unwrap();
    let grads = g.backward(l).unwrap();
    assert!(grads.wrt(v).is_none());

    // mixed: only the live branch contributes
    let mut g = Graph::new();
    let v = g.input(Tensor::vector(vec![2.0])).unwrap();
    let d = g.detach(v).unwrap();
    let prod = g.mul(v, d).unwrap();
    let l = g.sum(prod).unwrap();
    let grads = g.backward(l).unwrap();
    assert_eq!(grads.wrt(v).unwrap().data(), &[2.0]);
}

#[test]
fn non_scalar_loss_is_rejected() {
    let mut g = Graph::new();
    let v = g.input(Tensor::zeros(&[2, 2])).unwrap();
    assert!(matches!(g.backward(v), Err(AutodiffError::NonScalarLoss { .. })));
}

#[test]
fn shape_mismatch_names_the_operation() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let b = g.constant(Tensor::zeros(&[2, 3])).unwrap();
    let err = g.matmul(a, b).unwrap_err();
    assert!(err.to_string().starts_with("matmul:"), "{err}");
    let c = g.constant(Tensor::zeros(&[2])).unwrap();
    let err = g.add(a, c).unwrap_err();
    assert!(matches!(err, AutodiffError::ShapeMismatch { op: "add", .. }));
    let err = g.gather(a, &[5]).unwrap_err();
    assert!(matches!(err, AutodiffError::IndexOutOfRange { op: "gather", .. }));
}

#[test]
fn non_finite_values_are_rejected_at_the_producing_op() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(vec![-1.0])).unwrap();
    assert!(matches!(g.log(a), Err(AutodiffError::NonFinite { op: "log", .. })));
}

#[test]
fn primitive_gradients_match_finite_differences() {
    // matmul both operand positions and the transposed variant
    let b = Tensor::randn(&[4, 3], 1.0, &mut rng(10));
    check_input(Tensor::randn(&[2, 4], 1.0, &mut rng(11)), |g, x| {
        let bv = g.constant(b.clone())?;
        let y = g.matmul(x, bv)?;
        project(g, y, 1)
    });
    let a = Tensor::randn(&[2, 4], 1.0, &mut rng(12));
    check_input(Tensor::randn(&[4, 3], 1.0, &mut rng(13)), |g, x| {
        let av = g.constant(a.clone())?;
        let y = g.matmul(av, x)?;
        project(g, y, 2)
    });
    check_input(Tensor::randn(&[5, 4], 1.0, &mut rng(14)), |g, x| {
        let av = g.constant(a.clone())?;
        let y = g.matmul_bt(av, x)?;
        let z = g.matmul_bt(x, av)?;
        let p = project(g, y, 3)?;
        let q = project(g, z, 4)?;
        g.add(p, q)
    });
    // broadcasting add/sub/mul in both roles
    let m = Tensor::randn(&[3, 4], 1.0, &mut rng(15));
    check_input(Tensor::randn(&[4], 1.0, &mut rng(16)), |g, x| {
        let mv = g.constant(m.clone())?;
        let s = g.add(mv, x)?;
        let d = g.sub(s, x)?;
        let d = g.sub(d, x)?;
        let p = g.mul(d, x)?;
        project(g, p, 5)
    });
    check_input(Tensor::randn(&[3, 4], 1.0, &mut rng(17)), |g, x| {
        let mv = g.constant(m.clone())?;
        let p = g.mul(x, mv)?;
        let q = g.mul(p, x)?;
        let r = g.scale(q, -0.7)?;
        let r = g.add_scalar(r, 0.3)?;
        project(g, r, 6)
    });
    // elementwise nonlinearities
    check_input(Tensor::randn(&[6], 0.8, &mut rng(18)), |g, x| {
        let e = g.exp(x)?;
        let t = g.tanh(x)?;
        let u = g.gelu(x)?;
        let s = g.add(e, t)?;
        let s = g.add(s, u)?;
        project(g, s, 7)
    });
    check_input(Tensor::vector(vec![0.5, 1.5, 2.0, 3.0]), |g, x| {
        let l = g.log(x)?;
        project(g, l, 8)
    });
    check_input(Tensor::vector(vec![-1.0, -0.2, 0.4, 1.3]), |g, x| {
        let r = g.relu(x)?;
        project(g, r, 9)
    });
    // clamp / minimum away from their kinks
    check_input(Tensor::vector(vec![0.5, 0.95, 1.1, 1.5]), |g, x| {
        let c = g.clamp(x, 0.8, 1.2)?;
        let two = g.constant(Tensor::vector(vec![1.0, 0.0, 2.0, 1.0]))?;
        let m = g.minimum(c, two)?;
        let m2 = g.minimum(two, x)?;
        let s = g.add(m, m2)?;
        project(g, s, 10)
    });
    // reductions and reshape
    check_input(Tensor::randn(&[2, 3], 1.0, &mut rng(19)), |g, x| {
        let r = g.reshape(x, vec![3, 2])?;
        let sq = g.mul(r, r)?;
        let m = g.mean(sq)?;
        let s = g.sum(x)?;
        let out = g.mul(m, s)?;
        g.sum(out)
    });
    // row normalization
    check_input(Tensor::randn(&[3, 5], 1.5, &mut rng(20)), |g, x| {
        let n = g.normalize(x, 1e-5)?;
        project(g, n, 11)
    });
    // gather with repeated indices
    check_input(Tensor::randn(&[4, 3], 1.0, &mut rng(21)), |g, x| {
        let r = g.gather(x, &[2, 0, 2, 3])?;
        project(g, r, 12)
    });
    // weighted cross-entropy and token log-probs
    check_input(Tensor::randn(&[4, 6], 1.0, &mut rng(22)), |g, x| {
        let ce = g.cross_entropy(x, &[1, 5, 0, 2], &[1.0, 0.0, 0.5, 2.0])?;
        let lp = g.token_log_prob(x, &[3, 3, 4, 0])?;
        let p = project(g, lp, 13)?;
        g.add(ce, p)
    });
    // squared error in both operand positions
    let y = Tensor::randn(&[3, 2], 1.0, &mut rng(23));
    check_input(Tensor::randn(&[3, 2], 1.0, &mut rng(24)), |g, x| {
        let yv = g.constant(y.clone())?;
        let a = g.squared_error(x, yv)?;
        let b = g.squared_error(yv, x)?;
        let b = g.scale(b, 0.25)?;
        g.add(a, b)
    });
}

#[test]
fn causal_attention_gradients_match_finite_differences() {
    let segments = [Segment { start: 0, len: 3 }, Segment { start: 3, len: 4 }];
    let k = Tensor::randn(&[7, 4], 1.0, &mut rng(30));
    let v = Tensor::randn(&[7, 4], 1.0, &mut rng(31));
    // q, k, v each as the free input
    for role in 0..3 {
        let x = Tensor::randn(&[7, 4], 1.0, &mut rng(32 + role));
        check_input(x, |g, x| {
            let kv = g.constant(k.clone())?;
            let vv = g.constant(v.clone())?;
            let (q, kk, vv) = match role {
                0 => (x, kv, vv),
                1 => (kv, x, vv),
                _ => (kv, vv, x),
            };
            let out = g.causal_attention(q, kk, vv, &segments, 2)?;
            project(g, out, 14)
        });
    }
    // shared input for all three roles
    check_input(Tensor::randn(&[7, 4], 1.0, &mut rng(40)), |g, x| {
        let out = g.causal_attention(x, x, x, &segments, 2)?;
        project(g, out, 15)
    });
}

#[test]
fn causal_attention_ignores_future_rows() {
    let segments = [Segment { start: 0, len: 4 }];
    let x = Tensor::randn(&[4, 4], 1.0, &mut rng(41));
    let mut y = x.clone();
    for c in 0..4 {
        y.data_mut()[3 * 4 + c] += 1.0;
    }
    let run = |t: &Tensor| {
        let mut g = Graph::new();
        let v = g.constant(t.clone()).unwrap();
        let o = g.causal_attention(v, v, v, &segments, 2).unwrap();
        g.value(o).clone()
    };
    let (a, b) = (run(&x), run(&y));
    assert_eq!(&a.data()[..12], &b.data()[..12]);
    assert_ne!(&a.data()[12..], &b.data()[12..]);
}

fn two_layer_store(seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    s.add("w1", Tensor::randn(&[9, 10], 0.4, &mut r), true);
    s.add("b1", Tensor::randn(&[10], 0.1, &mut r), false);
    s.add("w2", Tensor::randn(&[10, 9], 0.4, &mut r), true);
    s.add("b2", Tensor::randn(&[9], 0.1, &mut r), false);
    s.add("gain", Tensor::vector(vec![1.3]), false);
    s
}

fn two_layer_loss(g: &mut Graph, s: &ParamStore, x: &Tensor, targets: &[usize]) -> Result<Var> {
    let xv = g.constant(x.clone())?;
    let w1 = g.param(s, ParamId(0))?;
    let b1 = g.param(s, ParamId(1))?;
    let w2 = g.param(s, ParamId(2))?;
    let b2 = g.param(s, ParamId(3))?;
    let gain = g.param(s, ParamId(4))?;
    let h = g.matmul(xv, w1)?;
    let h = g.add(h, b1)?;
    let h = g.tanh(h)?;
    let o = g.matmul(h, w2)?;
    let o = g.add(o, b2)?;
    let o = g.mul(o, gain)?;
    let w = vec![1.0; targets.len()];
    g.cross_entropy(o, targets, &w)
}

#[test]
fn two_layer_net_gradients_match_finite_differences() {
    let store = two_layer_store(50);
    assert_eq!(store.num_scalars(), 200);
    let x = Tensor::randn(&[6, 9], 1.0, &mut rng(51));
    let targets = [0, 3, 8, 2, 2, 7];
    let mut g = Graph::new();
    let l = two_layer_loss(&mut g, &store, &x, &targets).unwrap();
    let analytic = g.backward(l).unwrap().dense(&store);
    let numeric = numeric_param_grads(&store, FD_STEP, |s| {
        let mut g = Graph::new();
        let l = two_layer_loss(&mut g, s, &x, &targets)?;
        Ok(g.value(l).item())
    })
    .unwrap();
    let err = max_relative_error(&analytic, &numeric);
    assert!(err < TOL, "max relative error {err}");
}

#[test]
fn repeated_evaluation_is_bit_identical() {
    let store = two_layer_store(60);
    let x = Tensor::randn(&[4, 9], 1.0, &mut rng(61));
    let run = || {
        let mut g = Graph::new();
        let l = two_layer_loss(&mut g, &store, &x, &[1, 2, 3, 4]).unwrap();
        let grads = g.backward(l).unwrap().dense(&store);
        (g.value(l).item().to_bits(), grads)
    };
    assert_eq!(run(), run());
}
