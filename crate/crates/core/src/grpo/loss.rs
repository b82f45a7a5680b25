//! Clipped-ratio surrogate with a k3 KL penalty toward the reference policy.

use minirec_autodiff::{Graph, ParamStore, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::decode::DiversityStat;
use crate::error::{Error, Result};
use crate::policy::Policy;
use crate::vocab::Task;

use super::reward::RewardVector;

/// One prompt's rollouts with everything the update needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub task: Task,
    pub prompt: Vec<u32>,
    /// Generated tokens per candidate, each ending in EOS.
    pub completions: Vec<Vec<u32>>,
    pub items: Vec<u32>,
    /// Per-token log-probs under the policy that generated the group.
    pub old_log_probs: Vec<Vec<f64>>,
    /// Per-token log-probs under the frozen reference policy.
    pub ref_log_probs: Vec<Vec<f64>>,
    pub rewards: RewardVector,
    pub advantages: Vec<f64>,
    pub diversity: DiversityStat,
}

impl RolloutGroup {
    pub fn len(&self) -> usize {
        self.completions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.completions.is_empty()
    }

    /// A group whose advantages are all zero adds no policy-gradient signal.
    pub fn is_informative(&self) -> bool {
        self.advantages.iter().any(|&a| a != 0.0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStats {
    pub loss: f64,
    /// Mean per-token KL estimate.
    pub kl: f64,
    /// Share of tokens whose ratio lies outside `[1 - eps, 1 + eps]`.
    pub clip_fraction: f64,
    pub n_tokens: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub clip_eps: f64,
    pub beta_kl: f64,
}

/// Full-vocabulary per-token log-probs of each completion, off the tape.
pub fn token_log_probs(policy: &Policy, store: &ParamStore, prompt: &[u32], completions: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
    let pairs: Vec<(&[u32], &[u32])> = completions.iter().map(|c| (prompt, c.as_slice())).collect();
    let mut g = Graph::new();
    let (lp, lens) = policy.completion_log_probs(&mut g, store, &pairs)?;
    let flat = g.value(lp).data();
    let mut out = Vec::with_capacity(lens.len());
    let mut at = 0;
    for n in lens {
        out.push(flat[at..at + n].to_vec());
        at += n;
    }
    Ok(out)
}

/// `-(1/G) Σ_i (1/|y_i|) Σ_t (min(r A, clip(r) A) - β KL)`, averaged over
/// groups. Parameters are read from `store`.
pub fn grpo_loss(
    policy: &Policy,
    g: &mut Graph,
    store: &ParamStore,
    groups: &[&RolloutGroup],
    config: &LossConfig,
) -> Result<(Var, LossStats)> {
    if groups.is_empty() {
        return Err(Error::invalid("GRPO loss needs at least one group"));
    }
    if !(config.clip_eps > 0.0 && config.clip_eps < 1.0) {
        return Err(Error::invalid(format!("clip epsilon {} must lie in (0, 1)", config.clip_eps)));
    }
    let mut pairs: Vec<(&[u32], &[u32])> = Vec::new();
    let (mut old, mut reference, mut adv, mut weight) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for grp in groups {
        let n = grp.len();
        if n == 0 || grp.advantages.len() != n || grp.old_log_probs.len() != n || grp.ref_log_probs.len() != n {
            return Err(Error::invalid("rollout group fields disagree in length"));
        }
        for i in 0..n {
            let c = &grp.completions[i];
            if grp.old_log_probs[i].len() != c.len() || grp.ref_log_probs[i].len() != c.len() {
                return Err(Error::invalid("per-token log-probs must match completion length"));
            }
            pairs.push((&grp.prompt, c));
            old.extend_from_slice(&grp.old_log_probs[i]);
            reference.extend_from_slice(&grp.ref_log_probs[i]);
            let w = 1.0 / (groups.len() * n * c.len()) as f64;
            for _ in 0..c.len() {
                adv.push(grp.advantages[i]);
                weight.push(w);
            }
        }
    }
    let n_tok = old.len();
    let (lp, _) = policy.completion_log_probs(g, store, &pairs)?;
    let old_v = g.constant(Tensor::vector(old))?;
    let ref_v = g.constant(Tensor::vector(reference))?;
    let adv_v = g.constant(Tensor::vector(adv))?;
    let w_v = g.constant(Tensor::vector(weight.clone()))?;

    let log_ratio = g.sub(lp, old_v)?;
    let max_log = f64::MAX.ln();
    if let Some((i, v)) = g.value(log_ratio).data().iter().enumerate().find(|(_, v)| !(v.abs() < max_log)) {
        return Err(Error::NonFinite {
            what: "importance ratio".into(),
            detail: format!("token {i}: log ratio {v}"),
        });
    }
    let ratio = g.exp(log_ratio)?;
    let unclipped = g.mul(ratio, adv_v)?;
    let clipped = g.clamp(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)?;
    let clipped = g.mul(clipped, adv_v)?;
    let term = g.minimum(unclipped, clipped)?;

    // k3 estimator: exp(d) - d - 1 with d = log π_ref - log π_θ
    let d = g.sub(ref_v, lp)?;
    let ed = g.exp(d)?;
    let kl = g.sub(ed, d)?;
    let kl = g.add_scalar(kl, -1.0)?;

    let pen = g.scale(kl, config.beta_kl)?;
    let obj = g.sub(term, pen)?;
    let obj = g.mul(obj, w_v)?;
    let total = g.sum(obj)?;
    let loss = g.scale(total, -1.0)?;

    let rv = g.value(ratio).data();
    let clipped_n = rv.iter().filter(|&&r| (r - 1.0).abs() > config.clip_eps).count();
    let stats = LossStats {
        loss: g.value(loss).item(),
        kl: g.value(kl).data().iter().sum::<f64>() / n_tok as f64,
        clip_fraction: clipped_n as f64 / n_tok as f64,
        n_tokens: n_tok,
    };
    Ok((loss, stats))
}
