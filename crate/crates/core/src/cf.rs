//! Matrix-factorization scorer trained with binary cross-entropy and one
//! sampled negative per positive.
//!
//! A user is represented by the mean of the "context" factors of their history
//! items, so the scorer works for any history without per-user parameters.

use minirec_autodiff::{adamw_step_dense, AdamWConfig, LrSchedule, OptimizerState, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::catalog::Example;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct CfBaseline {
    factors: usize,
    n_items: usize,
    /// `[n_items, factors]`, used to build user vectors from histories.
    context: Vec<f64>,
    /// `[n_items, factors]`, scored against user vectors.
    target: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CfParams {
    pub factors: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for CfParams {
    fn default() -> Self {
        Self {
            factors: 16,
            epochs: 10,
            lr: 1e-2,
            batch_size: 64,
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `log(1 + exp(x))` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl CfBaseline {
    pub fn random(n_items: usize, factors: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, rng::CF);
        let std = 1.0 / (factors as f64).sqrt();
        let context = Tensor::randn(&[n_items, factors], std, &mut r).into_data();
        let target = Tensor::randn(&[n_items, factors], std, &mut r).into_data();
        Self {
            factors,
            n_items,
            context,
            target,
        }
    }

    pub fn n_items(&self) -> usize {
        self.n_items
    }

    pub fn user_vector(&self, history: &[u32]) -> Vec<f64> {
        let f = self.factors;
        let mut u = vec![0.0; f];
        if history.is_empty() {
            return u;
        }
        for &h in history {
            let row = &self.context[h as usize * f..(h as usize + 1) * f];
            for (a, b) in u.iter_mut().zip(row) {
                *a += b;
            }
        }
        let n = history.len() as f64;
        u.iter_mut().for_each(|a| *a /= n);
        u
    }

    pub fn score_with(&self, user: &[f64], item: u32) -> f64 {
        let f = self.factors;
        let row = &self.target[item as usize * f..(item as usize + 1) * f];
        user.iter().zip(row).map(|(a, b)| a * b).sum()
    }

    pub fn score(&self, history: &[u32], item: u32) -> f64 {
        self.score_with(&self.user_vector(history), item)
    }

    /// All items ranked by descending score, ties by item id.
    pub fn rank_all(&self, history: &[u32]) -> Vec<u32> {
        let u = self.user_vector(history);
        let mut scored: Vec<(f64, u32)> = (0..self.n_items as u32).map(|i| (self.score_with(&u, i), i)).collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        scored.into_iter().map(|(_, i)| i).collect()
    }
}

/// Trains the scorer; returns it with the mean BCE of every epoch.
pub fn train_cf_baseline(
    train: &[Example],
    n_items: usize,
    params: &CfParams,
    seed: u64,
) -> Result<(CfBaseline, Vec<f64>)> {
    if params.factors < 2 {
        return Err(Error::invalid("factors must be at least 2"));
    }
    if n_items < 2 {
        return Err(Error::invalid("need at least two items to sample negatives"));
    }
    let mut model = CfBaseline::random(n_items, params.factors, seed);
    let f = params.factors;
    let mut store = ParamStore::new();
    let ctx_id = store.add("context", Tensor::new(vec![n_items, f], model.context.clone())?, false);
    let tgt_id = store.add("target", Tensor::new(vec![n_items, f], model.target.clone())?, false);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = OptimizerState::new(&store, cfg, LrSchedule::Constant { lr: params.lr });
    let mut r = rng::stream(seed ^ 0x5eed, rng::CF);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(params.epochs);
    for _ in 0..params.epochs {
        order.shuffle(&mut r);
        let mut total = 0.0;
        for batch in order.chunks(params.batch_size.max(1)) {
            let mut g_ctx = vec![0.0; n_items * f];
            let mut g_tgt = vec![0.0; n_items * f];
            for &ei in batch {
                let ex = &train[ei];
                let neg = loop {
                    let cand = r.random_range(0..n_items) as u32;
                    if cand != ex.target {
                        break cand;
                    }
                };
                let u = model.user_vector(&ex.history);
                let mut du = vec![0.0; f];
                for (item, label) in [(ex.target, 1.0), (neg, 0.0)] {
                    let s = model.score_with(&u, item);
                    total += if label > 0.0 { softplus(-s) } else { softplus(s) };
                    let ds = sigmoid(s) - label;
                    let row = &model.target[item as usize * f..(item as usize + 1) * f];
                    for k in 0..f {
                        du[k] += ds * row[k];
                        g_tgt[item as usize * f + k] += ds * u[k];
                    }
                }
                let share = 1.0 / ex.history.len().max(1) as f64;
                for &h in &ex.history {
                    for k in 0..f {
                        g_ctx[h as usize * f + k] += share * du[k];
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            g_ctx.iter_mut().for_each(|g| *g *= scale);
            g_tgt.iter_mut().for_each(|g| *g *= scale);
            let grads = [Tensor::new(vec![n_items, f], g_ctx)?, Tensor::new(vec![n_items, f], g_tgt)?];
            adamw_step_dense(&mut store, &grads, &mut opt, params.lr)?;
            model.context.copy_from_slice(store.get(ctx_id).data());
            model.target.copy_from_slice(store.get(tgt_id).data());
        }
        history.push(total / (2 * train.len().max(1)) as f64);
    }
    Ok((model, history))
}
