//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward evaluation. Each primitive appends a
//! node holding its output value and whatever it needs for the backward pass;
//! node order is therefore a topological order and [`Graph::backward`] is a
//! single reverse sweep.

use crate::error::{AutodiffError, Result};
use crate::gemm::{gemm, matmul_dense, MatMut, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Contiguous run of rows `[start, start + len)` that attends only within itself.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Tanh { a: usize },
    Relu { a: usize },
    Gelu { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    Reshape { a: usize },
    Gather { table: usize, idx: Vec<usize> },
    Normalize { a: usize, inv_std: Vec<f64> },
    CrossEntropy {
        logits: usize,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    TokenLogProb {
        logits: usize,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        segments: Vec<Segment>,
        heads: usize,
        probs: Vec<f64>,
    },
    Minimum { a: usize, b: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    SquaredError { a: usize, b: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::Exp { .. } => "exp",
            Op::Log { .. } => "log",
            Op::Tanh { .. } => "tanh",
            Op::Relu { .. } => "relu",
            Op::Gelu { .. } => "gelu",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Reshape { .. } => "reshape",
            Op::Gather { .. } => "gather",
            Op::Normalize { .. } => "normalize",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::TokenLogProb { .. } => "token_log_prob",
            Op::Attention { .. } => "causal_attention",
            Op::Minimum { .. } => "minimum",
            Op::Clamp { .. } => "clamp",
            Op::SquaredError { .. } => "squared_error",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The tape.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bound: Vec<Option<Var>>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `b` may be tiled over `a` when its shape is a suffix of `a`'s or it holds one value.
fn suffix_broadcast(a: &[usize], b: &[usize]) -> bool {
    b.iter().product::<usize>() == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

fn log_softmax_row(row: &[f64], probs: &mut [f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (p, &x) in probs.iter_mut().zip(row) {
        *p = (x - max).exp();
        z += *p;
    }
    for p in probs.iter_mut() {
        *p /= z;
    }
    max + z.ln()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, i: usize) -> &[usize] {
        self.nodes[i].value.shape()
    }

    fn data(&self, i: usize) -> &[f64] {
        self.nodes[i].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if let Some(index) = value.first_non_finite() {
            return Err(AutodiffError::NonFinite {
                op: op.name(),
                index,
            });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn grad_any(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, false)
    }

    /// Free leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter. Repeated calls with the same id return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(Some(v)) = self.bound.get(id.0) {
            return Ok(*v);
        }
        let v = self.push(store.get(id).clone(), Op::Param, true)?;
        if self.bound.len() <= id.0 {
            self.bound.resize(id.0 + 1, None);
        }
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    /// Stop-gradient: same value, cut from the tape.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let value = self.nodes[a.0].value.clone();
        self.push(value, Op::Leaf, false)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a.0).to_vec(), self.shape(b.0).to_vec());
        let op = if trans_b { "matmul_bt" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != kb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        let out = matmul_dense(m, k, n, self.data(a.0), false, self.data(b.0), trans_b);
        let rg = self.grad_any(&[a.0, b.0]);
        self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                a: a.0,
                b: b.0,
                trans_b,
            },
            rg,
        )
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `[m, k] x [n, k]^T`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str) -> Result<Vec<f64>> {
        let (sa, sb) = (self.shape(a.0), self.shape(b.0));
        if !suffix_broadcast(sa, sb) {
            return Err(AutodiffError::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (da, db) = (self.data(a.0), self.data(b.0));
        let nb = db.len();
        let f: fn(f64, f64) -> f64 = match name {
            "add" => |x, y| x + y,
            "sub" => |x, y| x - y,
            _ => |x, y| x * y,
        };
        Ok(da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % nb]))
            .collect())
    }

    /// Elementwise `a + b`; `b` may broadcast over the leading dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add")?;
        let shape = self.shape(a.0).to_vec();
        let rg = self.grad_any(&[a.0, b.0]);
        self.push(Tensor::new(shape, out)?, Op::Add { a: a.0, b: b.0 }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub")?;
        let shape = self.shape(a.0).to_vec();
        let rg = self.grad_any(&[a.0, b.0]);
        self.push(Tensor::new(shape, out)?, Op::Sub { a: a.0, b: b.0 }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul")?;
        let shape = self.shape(a.0).to_vec();
        let rg = self.grad_any(&[a.0, b.0]);
        self.push(Tensor::new(shape, out)?, Op::Mul { a: a.0, b: b.0 }, rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| f(x)).collect())?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::Scale { a: a.0, c }, |x| x * c)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Op::AddScalar { a: a.0 }, |x| x + c)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Exp { a: a.0 }, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Log { a: a.0 }, f64::ln)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Tanh { a: a.0 }, f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu { a: a.0 }, |x| x.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Gelu { a: a.0 }, gelu)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(AutodiffError::InvalidArgument {
                op: "clamp",
                detail: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        self.unary(a, Op::Clamp { a: a.0, lo, hi }, |x| x.clamp(lo, hi))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a.0), self.shape(b.0));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "minimum",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(&x, &y)| x.min(y))
            .collect();
        let shape = sa.to_vec();
        let rg = self.grad_any(&[a.0, b.0]);
        self.push(Tensor::new(shape, out)?, Op::Minimum { a: a.0, b: b.0 }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.nodes[a.0].value.sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        if t.is_empty() {
            return Err(AutodiffError::InvalidArgument {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let s = t.sum() / t.len() as f64;
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.nodes[a.0].value.clone().reshape(shape)?;
        let rg = self.nodes[a.0].requires_grad;
        self.push(out, Op::Reshape { a: a.0 }, rg)
    }

    /// Row gather `out[i] = table[idx[i]]` (embedding lookup).
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.ndim() != 2 {
            return Err(AutodiffError::InvalidArgument {
                op: "gather",
                detail: format!("table must be 2-D, got {:?}", t.shape()),
            });
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(t.row(i));
        }
        let rg = self.nodes[table.0].requires_grad;
        self.push(
            Tensor::new(vec![idx.len(), cols], out)?,
            Op::Gather {
                table: table.0,
                idx: idx.to_vec(),
            },
            rg,
        )
    }

    /// Zero-mean, unit-variance normalization of every row (last dim).
    pub fn normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = &self.nodes[a.0].value;
        let cols = t.cols();
        if cols == 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "normalize",
                detail: "zero-width rows".into(),
            });
        }
        let mut out = t.data().to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / cols);
        for row in out.chunks_mut(cols) {
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let shape = t.shape().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::new(shape, out)?, Op::Normalize { a: a.0, inv_std }, rg)
    }

    fn check_targets(&self, op: &'static str, logits: Var, targets: &[usize]) -> Result<usize> {
        let t = &self.nodes[logits.0].value;
        if t.ndim() != 2 || t.shape()[0] != targets.len() {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let v = t.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&c| c >= v) {
            return Err(AutodiffError::IndexOutOfRange {
                op,
                index: bad,
                bound: v,
            });
        }
        Ok(v)
    }

    /// Weighted softmax cross-entropy `sum_i w_i * (-log softmax(z_i)[t_i])`.
    ///
    /// A zero weight removes the row from the loss and from the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let v = self.check_targets("cross_entropy", logits, targets)?;
        if weights.len() != targets.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "cross_entropy",
                lhs: vec![targets.len()],
                rhs: vec![weights.len()],
            });
        }
        let z = self.data(logits.0);
        let mut probs = vec![0.0; z.len()];
        let mut loss = 0.0;
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            let row = &z[i * v..(i + 1) * v];
            let lse = log_softmax_row(row, &mut probs[i * v..(i + 1) * v]);
            if w != 0.0 {
                loss += w * (lse - row[t]);
            }
        }
        let rg = self.nodes[logits.0].requires_grad;
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Per-row `log softmax(z_i)[t_i]`, shape `[n]`.
    pub fn token_log_prob(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.check_targets("token_log_prob", logits, targets)?;
        let z = self.data(logits.0);
        let mut probs = vec![0.0; z.len()];
        let mut out = Vec::with_capacity(targets.len());
        for (i, &t) in targets.iter().enumerate() {
            let row = &z[i * v..(i + 1) * v];
            let lse = log_softmax_row(row, &mut probs[i * v..(i + 1) * v]);
            out.push(row[t] - lse);
        }
        let rg = self.nodes[logits.0].requires_grad;
        self.push(
            Tensor::vector(out),
            Op::TokenLogProb {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// `sum((a - b)^2)`.
    pub fn squared_error(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a.0), self.shape(b.0));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "squared_error",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let s: f64 = self
            .data(a.0)
            .iter()
            .zip(self.data(b.0))
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let rg = self.grad_any(&[a.0, b.0]);
        self.push(Tensor::scalar(s), Op::SquaredError { a: a.0, b: b.0 }, rg)
    }

    /// Multi-head causal self-attention over packed sequences.
    ///
    /// `q`, `k`, `v` are `[n, d]` with rows grouped into `segments`; row `i` of a
    /// segment attends to rows `0..=i` of the same segment. Heads split the
    /// width evenly and scores are scaled by `1/sqrt(d/heads)`.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
    ) -> Result<Var> {
        let shape = self.shape(q.0).to_vec();
        for other in [k, v] {
            if self.shape(other.0) != shape.as_slice() {
                return Err(AutodiffError::ShapeMismatch {
                    op: "causal_attention",
                    lhs: shape,
                    rhs: self.shape(other.0).to_vec(),
                });
            }
        }
        if shape.len() != 2 || heads == 0 || shape[1] % heads != 0 {
            return Err(AutodiffError::InvalidArgument {
                op: "causal_attention",
                detail: format!("width of {shape:?} not divisible into {heads} heads"),
            });
        }
        let (n, d) = (shape[0], shape[1]);
        let mut covered = 0;
        for s in segments {
            if s.start != covered || s.len == 0 {
                return Err(AutodiffError::InvalidArgument {
                    op: "causal_attention",
                    detail: "segments must tile the rows contiguously".into(),
                });
            }
            covered += s.len;
        }
        if covered != n {
            return Err(AutodiffError::InvalidArgument {
                op: "causal_attention",
                detail: format!("segments cover {covered} of {n} rows"),
            });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let total: usize = segments.iter().map(|s| s.len * s.len).sum::<usize>() * heads;
        let mut probs = vec![0.0; total];
        let mut out = vec![0.0; n * d];
        let (qd, kd, vd) = (self.data(q.0), self.data(k.0), self.data(v.0));
        let mut off = 0;
        for s in segments {
            let l = s.len;
            for h in 0..heads {
                let p = &mut probs[off..off + l * l];
                gemm(
                    l,
                    dh,
                    l,
                    scale,
                    MatRef::block(qd, d, s.start, h * dh),
                    MatRef::block(kd, d, s.start, h * dh).t(),
                    0.0,
                    MatMut::dense(p, l),
                );
                for i in 0..l {
                    let row = &mut p[i * l..(i + 1) * l];
                    let max = row[..=i].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row[..=i].iter_mut() {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    for x in row[..=i].iter_mut() {
                        *x /= z;
                    }
                    row[i + 1..].fill(0.0);
                }
                gemm(
                    l,
                    l,
                    dh,
                    1.0,
                    MatRef::dense(p, l, false),
                    MatRef::block(vd, d, s.start, h * dh),
                    0.0,
                    MatMut::block(&mut out, d, s.start, h * dh),
                );
                off += l * l;
            }
        }
        let rg = self.grad_any(&[q.0, k.0, v.0]);
        self.push(
            Tensor::new(vec![n, d], out)?,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                segments: segments.to_vec(),
                heads,
                probs,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(AutodiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let nodes = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| n.requires_grad)
                    .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients {
            nodes,
            bound: self.bound.clone(),
        })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let needs = |j: usize| self.nodes[j].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[0], sa[1]);
                let n = if *trans_b { sb[0] } else { sb[1] };
                if needs(*a) {
                    // dA = dC op(B)^T
                    let ga = acc(grads, *a, m * k);
                    gemm(
                        m,
                        n,
                        k,
                        1.0,
                        MatRef::dense(g, n, false),
                        MatRef::dense(self.data(*b), if *trans_b { k } else { n }, !*trans_b),
                        1.0,
                        MatMut::dense(ga, k),
                    );
                }
                if needs(*b) {
                    let gb = acc(grads, *b, k * n);
                    if *trans_b {
                        // dB = dC^T A, shape [n, k]
                        gemm(
                            n,
                            m,
                            k,
                            1.0,
                            MatRef::dense(g, n, true),
                            MatRef::dense(self.data(*a), k, false),
                            1.0,
                            MatMut::dense(gb, k),
                        );
                    } else {
                        // dB = A^T dC, shape [k, n]
                        gemm(
                            k,
                            m,
                            n,
                            1.0,
                            MatRef::dense(self.data(*a), k, true),
                            MatRef::dense(g, n, false),
                            1.0,
                            MatMut::dense(gb, n),
                        );
                    }
                }
            }
            Op::Add { a, b } | Op::Sub { a, b } => {
                let sign = if matches!(node.op, Op::Sub { .. }) {
                    -1.0
                } else {
                    1.0
                };
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (x, y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                }
                if needs(*b) {
                    let nb = self.nodes[*b].value.len();
                    let gb = acc(grads, *b, nb);
                    for chunk in g.chunks(nb) {
                        for (x, y) in gb.iter_mut().zip(chunk) {
                            *x += sign * y;
                        }
                    }
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for (idx, x) in ga.iter_mut().enumerate() {
                        *x += g[idx] * db[idx % nb];
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, nb);
                    for (idx, (&gv, &av)) in g.iter().zip(da).enumerate() {
                        gb[idx % nb] += gv * av;
                    }
                }
            }
            Op::Scale { a, c } => {
                let ga = acc(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += c * y;
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                let ga = acc(grads, *a, g.len());
                for (x, y) in ga.iter_mut().zip(g) {
                    *x += y;
                }
            }
            Op::Exp { a } => {
                let out = node.value.data();
                let ga = acc(grads, *a, g.len());
                for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                    *x += y * o;
                }
            }
            Op::Log { a } => {
                let inp = self.data(*a);
                let ga = acc(grads, *a, g.len());
                for ((x, y), v) in ga.iter_mut().zip(g).zip(inp) {
                    *x += y / v;
                }
            }
            Op::Tanh { a } => {
                let out = node.value.data();
                let ga = acc(grads, *a, g.len());
                for ((x, y), o) in ga.iter_mut().zip(g).zip(out) {
                    *x += y * (1.0 - o * o);
                }
            }
            Op::Relu { a } => {
                let inp = self.data(*a);
                let ga = acc(grads, *a, g.len());
                for ((x, y), v) in ga.iter_mut().zip(g).zip(inp) {
                    if *v > 0.0 {
                        *x += y;
                    }
                }
            }
            Op::Gelu { a } => {
                let inp = self.data(*a);
                let ga = acc(grads, *a, g.len());
                for ((x, y), v) in ga.iter_mut().zip(g).zip(inp) {
                    *x += y * gelu_grad(*v);
                }
            }
            Op::Clamp { a, lo, hi } => {
                let inp = self.data(*a);
                let ga = acc(grads, *a, g.len());
                for ((x, y), v) in ga.iter_mut().zip(g).zip(inp) {
                    if *v >= *lo && *v <= *hi {
                        *x += y;
                    }
                }
            }
            Op::Minimum { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                // ties route to `a`
                if needs(*a) {
                    let ga = acc(grads, *a, g.len());
                    for idx in 0..g.len() {
                        if da[idx] <= db[idx] {
                            ga[idx] += g[idx];
                        }
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, g.len());
                    for idx in 0..g.len() {
                        if da[idx] > db[idx] {
                            gb[idx] += g[idx];
                        }
                    }
                }
            }
            Op::Sum { a } => {
                let n = self.nodes[*a].value.len();
                let ga = acc(grads, *a, n);
                for x in ga.iter_mut() {
                    *x += g[0];
                }
            }
            Op::Mean { a } => {
                let n = self.nodes[*a].value.len();
                let ga = acc(grads, *a, n);
                let s = g[0] / n as f64;
                for x in ga.iter_mut() {
                    *x += s;
                }
            }
            Op::Gather { table, idx } => {
                let t = &self.nodes[*table].value;
                let cols = t.cols();
                let gt = acc(grads, *table, t.len());
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut gt[src * cols..(src + 1) * cols];
                    for (x, y) in dst.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                        *x += y;
                    }
                }
            }
            Op::Normalize { a, inv_std } => {
                let xhat = node.value.data();
                let cols = node.value.cols();
                let ga = acc(grads, *a, g.len());
                for (r, &is) in inv_std.iter().enumerate() {
                    let rg = &g[r * cols..(r + 1) * cols];
                    let rx = &xhat[r * cols..(r + 1) * cols];
                    let mean_g = rg.iter().sum::<f64>() / cols as f64;
                    let mean_gx = rg.iter().zip(rx).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        ga[r * cols + c] += is * (rg[c] - mean_g - rx[c] * mean_gx);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.nodes[*logits].value.cols();
                let gl = acc(grads, *logits, probs.len());
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let s = g[0] * w;
                    let row = &mut gl[r * v..(r + 1) * v];
                    for (x, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *x += s * p;
                    }
                    row[t] -= s;
                }
            }
            Op::TokenLogProb {
                logits,
                targets,
                probs,
            } => {
                let v = self.nodes[*logits].value.cols();
                let gl = acc(grads, *logits, probs.len());
                for (r, &t) in targets.iter().enumerate() {
                    let s = g[r];
                    if s == 0.0 {
                        continue;
                    }
                    let row = &mut gl[r * v..(r + 1) * v];
                    for (x, p) in row.iter_mut().zip(&probs[r * v..(r + 1) * v]) {
                        *x -= s * p;
                    }
                    row[t] += s;
                }
            }
            Op::SquaredError { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                if needs(*a) {
                    let ga = acc(grads, *a, da.len());
                    for idx in 0..da.len() {
                        ga[idx] += 2.0 * g[0] * (da[idx] - db[idx]);
                    }
                }
                if needs(*b) {
                    let gb = acc(grads, *b, db.len());
                    for idx in 0..db.len() {
                        gb[idx] -= 2.0 * g[0] * (da[idx] - db[idx]);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                probs,
            } => {
                self.attention_backward(g, (*q, *k, *v), segments, *heads, probs, grads);
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        (q, k, v): (usize, usize, usize),
        segments: &[Segment],
        heads: usize,
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let shape = self.shape(q);
        let (n, d) = (shape[0], shape[1]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (self.data(q), self.data(k), self.data(v));
        let mut dq = vec![0.0; n * d];
        let mut dk = vec![0.0; n * d];
        let mut dv = vec![0.0; n * d];
        let max_l = segments.iter().map(|s| s.len).max().unwrap_or(0);
        let mut dp = vec![0.0; max_l * max_l];
        let mut off = 0;
        for s in segments {
            let l = s.len;
            for h in 0..heads {
                let p = &probs[off..off + l * l];
                off += l * l;
                let col = h * dh;
                // dV = P^T dO
                gemm(
                    l,
                    l,
                    dh,
                    1.0,
                    MatRef::dense(p, l, true),
                    MatRef::block(g, d, s.start, col),
                    1.0,
                    MatMut::block(&mut dv, d, s.start, col),
                );
                // dP = dO V^T
                let dpl = &mut dp[..l * l];
                gemm(
                    l,
                    dh,
                    l,
                    1.0,
                    MatRef::block(g, d, s.start, col),
                    MatRef::block(vd, d, s.start, col).t(),
                    0.0,
                    MatMut::dense(dpl, l),
                );
                // dS = P * (dP - rowsum(P * dP))
                for i in 0..l {
                    let pr = &p[i * l..(i + 1) * l];
                    let dr = &mut dpl[i * l..(i + 1) * l];
                    let dot: f64 = pr[..=i].iter().zip(&dr[..=i]).map(|(a, b)| a * b).sum();
                    for j in 0..=i {
                        dr[j] = pr[j] * (dr[j] - dot);
                    }
                    dr[i + 1..].fill(0.0);
                }
                gemm(
                    l,
                    l,
                    dh,
                    scale,
                    MatRef::dense(dpl, l, false),
                    MatRef::block(kd, d, s.start, col),
                    1.0,
                    MatMut::block(&mut dq, d, s.start, col),
                );
                gemm(
                    l,
                    l,
                    dh,
                    scale,
                    MatRef::dense(dpl, l, true),
                    MatRef::block(qd, d, s.start, col),
                    1.0,
                    MatMut::block(&mut dk, d, s.start, col),
                );
            }
        }
        for (idx, buf) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[idx].requires_grad {
                let dst = acc(grads, idx, n * d);
                for (x, y) in dst.iter_mut().zip(&buf) {
                    *x += y;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    grads[idx].get_or_insert_with(|| vec![0.0; len])
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    bound: Vec<Option<Var>>,
}

impl Gradients {
    /// Gradient for a parameter, `None` when the parameter was not reachable.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        let v = (*self.bound.get(id.0)?)?;
        self.nodes[v.0].as_ref()
    }

    /// Gradient for a parameter, zero-filled when unreachable.
    pub fn param_or_zeros(&self, id: ParamId, store: &ParamStore) -> Tensor {
        self.param(id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
    }

    /// Gradient with respect to any node that required one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0)?.as_ref()
    }

    /// Dense per-parameter gradients in store order.
    pub fn dense(&self, store: &ParamStore) -> Vec<Tensor> {
        store.ids().map(|id| self.param_or_zeros(id, store)).collect()
    }
}
