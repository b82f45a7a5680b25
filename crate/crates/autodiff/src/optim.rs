//! AdamW with decoupled weight decay, plus the cosine learning-rate schedule.

use crate::error::{AutodiffError, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LrSchedule {
    Constant { lr: f64 },
    Cosine { base_lr: f64, total_steps: u64 },
}

impl LrSchedule {
    /// Learning rate for the (0-based) step about to be taken.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        match *self {
            LrSchedule::Constant { lr } => Ok(lr),
            LrSchedule::Cosine {
                base_lr,
                total_steps,
            } => cosine_lr(step.min(total_steps), total_steps, base_lr),
        }
    }
}

/// `base_lr * (1 + cos(pi * step / total_steps)) / 2`.
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(AutodiffError::InvalidArgument {
            op: "cosine_lr",
            detail: "total_steps must be positive".into(),
        });
    }
    if step > total_steps {
        return Err(AutodiffError::InvalidArgument {
            op: "cosine_lr",
            detail: format!("step {step} beyond total_steps {total_steps}"),
        });
    }
    let frac = step as f64 / total_steps as f64;
    Ok(base_lr * (1.0 + (std::f64::consts::PI * frac).cos()) / 2.0)
}

/// Moment accumulators for every parameter of one store.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub schedule: LrSchedule,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(store: &ParamStore, config: AdamWConfig, schedule: LrSchedule) -> Self {
        let zeros: Vec<Tensor> = store
            .iter()
            .map(|(_, _, t)| Tensor::zeros(t.shape()))
            .collect();
        Self {
            config,
            schedule,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Learning rate the schedule assigns to the next step.
    pub fn current_lr(&self) -> Result<f64> {
        self.schedule.lr_at(self.step)
    }
}

/// One AdamW update with an explicit learning rate. Unreachable parameters
/// see a zero gradient, so only weight decay (if any) moves them.
pub fn adamw_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    let dense = grads.dense(params);
    adamw_step_dense(params, &dense, state, lr)
}

/// Same as [`adamw_step`] with gradients already laid out in store order.
pub fn adamw_step_dense(
    params: &mut ParamStore,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(AutodiffError::InvalidArgument {
            op: "adamw_step",
            detail: format!(
                "{} parameters, {} gradients, {} moment slots",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        });
    }
    for (id, g) in params.ids().zip(grads) {
        if g.shape() != params.get(id).shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "adamw_step",
                lhs: params.get(id).shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        if let Some(index) = g.first_non_finite() {
            return Err(AutodiffError::NonFiniteGradient {
                param: params.name(id).to_string(),
                index,
                value: g.data()[index],
            });
        }
    }
    let c = state.config;
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - c.beta1.powi(t);
    let bc2 = 1.0 - c.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let decay = if params.decays(id) { c.weight_decay } else { 0.0 };
        let g = grads[id.0].data();
        let m = state.m[id.0].data_mut();
        let v = state.v[id.0].data_mut();
        let p = params.get_mut(id).data_mut();
        for i in 0..p.len() {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            p[i] -= lr * decay * p[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + c.eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;

    fn one_param(w: f64, decay: bool) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![w]), decay);
        s
    }

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_lr(0, 100, 3e-4).unwrap(), 3e-4);
        assert!(cosine_lr(100, 100, 3e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 3e-4).unwrap() - 1.5e-4).abs() < 1e-18);
        assert!(cosine_lr(0, 0, 1.0).is_err());
        assert!(cosine_lr(5, 4, 1.0).is_err());
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = one_param(0.7, true);
        let cfg = AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut st = OptimizerState::new(&s, cfg, LrSchedule::Constant { lr: 0.1 });
        adamw_step_dense(&mut s, &[Tensor::vector(vec![0.0])], &mut st, 0.1).unwrap();
        assert_eq!(s.get(crate::ParamId(0)).data(), &[0.7]);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn one_step_on_square_reduces_magnitude() {
        let mut s = one_param(1.0, true);
        let mut st = OptimizerState::new(&s, AdamWConfig::default(), LrSchedule::Constant { lr: 0.01 });
        let f = |s: &ParamStore| s.get(crate::ParamId(0)).data()[0].powi(2);
        let before = f(&s);
        let mut g = Graph::new();
        let w = g.param(&s, crate::ParamId(0)).unwrap();
        let sq = g.mul(w, w).unwrap();
        let loss = g.sum(sq).unwrap();
        let grads = g.backward(loss).unwrap();
        adamw_step(&mut s, &grads, &mut st, 0.01).unwrap();
        assert!(f(&s) < before);
    }

    #[test]
    fn decay_alone_shrinks_norm() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::vector(vec![1.0, -2.0, 3.0]), true);
        let mut st = OptimizerState::new(
            &s,
            AdamWConfig {
                weight_decay: 0.1,
                ..Default::default()
            },
            LrSchedule::Constant { lr: 0.1 },
        );
        let before = s.get(crate::ParamId(0)).norm();
        adamw_step_dense(&mut s, &[Tensor::zeros(&[3])], &mut st, 0.1).unwrap();
        let after = s.get(crate::ParamId(0)).norm();
        assert!((after - before * (1.0 - 0.01)).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_aborts_with_parameter_name() {
        let mut s = one_param(1.0, false);
        let mut st = OptimizerState::new(&s, AdamWConfig::default(), LrSchedule::Constant { lr: 0.1 });
        let err = adamw_step_dense(&mut s, &[Tensor::vector(vec![f64::NAN])], &mut st, 0.1).unwrap_err();
        assert!(matches!(err, AutodiffError::NonFiniteGradient { ref param, .. } if param == "w"));
        assert_eq!(st.step, 0);
        assert_eq!(s.get(crate::ParamId(0)).data(), &[1.0]);
    }
}
