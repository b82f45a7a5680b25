//! Per-candidate rewards for one rollout group.

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::cf::CfBaseline;
use crate::error::{Error, Result};

/// Which reward components are summed into the total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRecipe {
    /// Add the normalized ranking penalty on negatives.
    pub ranking: bool,
    /// Weight of the within-group standardized CF score; 0 disables it.
    pub collaborative: f64,
    /// Weight of the candidate/target embedding cosine; 0 disables it.
    pub semantic: f64,
}

impl Default for RewardRecipe {
    fn default() -> Self {
        Self::rule_rank()
    }
}

impl RewardRecipe {
    pub fn rule_only() -> Self {
        Self {
            ranking: false,
            collaborative: 0.0,
            semantic: 0.0,
        }
    }

    pub fn rule_rank() -> Self {
        Self {
            ranking: true,
            ..Self::rule_only()
        }
    }

    /// Rule + ranking + collaborative.
    pub fn collaborative() -> Self {
        Self {
            collaborative: 1.0,
            ..Self::rule_rank()
        }
    }

    /// Rule + ranking + semantic.
    pub fn semantic() -> Self {
        Self {
            semantic: 1.0,
            ..Self::rule_rank()
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "rule_only" => Ok(Self::rule_only()),
            "rule_rank" => Ok(Self::rule_rank()),
            "collab" => Ok(Self::collaborative()),
            "semantic" => Ok(Self::semantic()),
            _ => Err(Error::invalid(format!(
                "unknown reward recipe {name:?} (expected rule_only, rule_rank, collab or semantic)"
            ))),
        }
    }

    pub fn name(&self) -> String {
        match (self.ranking, self.collaborative != 0.0, self.semantic != 0.0) {
            (false, false, false) => "rule_only".into(),
            (true, false, false) => "rule_rank".into(),
            (true, true, false) if self.collaborative == 1.0 => "collab".into(),
            (true, false, true) if self.semantic == 1.0 => "semantic".into(),
            _ => format!("custom(rank={},collab={},semantic={})", self.ranking, self.collaborative, self.semantic),
        }
    }
}

/// Reward components of every candidate in a group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardVector {
    pub target: u32,
    pub rule: Vec<f64>,
    pub rank: Vec<f64>,
    /// Weighted sum of the enabled dense components.
    pub dense: Vec<f64>,
    pub total: Vec<f64>,
}

pub fn rule_reward(candidate: u32, target: u32) -> f64 {
    if candidate == target {
        1.0
    } else {
        0.0
    }
}

/// Ranking reward with an explicit logarithm base.
pub fn ranking_reward_in_base(ranks: &[usize], is_target: &[bool], base: f64) -> Vec<f64> {
    assert_eq!(ranks.len(), is_target.len());
    let raw: Vec<f64> = ranks
        .iter()
        .zip(is_target)
        .map(|(&r, &t)| if t { 0.0 } else { -1.0 / ((r + 1) as f64).log(base) })
        .collect();
    let total: f64 = raw.iter().sum();
    if total == 0.0 {
        return vec![0.0; raw.len()];
    }
    raw.iter().map(|r| -r / total).collect()
}

/// Negatives get `-1/ln(rank+1)` normalized so the group sums to -1; the
/// target gets 0. A group without negatives gets all zeros.
pub fn ranking_reward(ranks: &[usize], is_target: &[bool]) -> Vec<f64> {
    ranking_reward_in_base(ranks, is_target, std::f64::consts::E)
}

/// Population standardization; constant inputs map to zeros.
fn standardize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < 1e-12 {
        return vec![0.0; xs.len()];
    }
    xs.iter().map(|x| (x - mean) / std).collect()
}

/// CF scores of the candidates for a user history, standardized within the group.
pub fn collaborative_reward(items: &[u32], history: &[u32], cf: &CfBaseline) -> Vec<f64> {
    if items.is_empty() {
        return Vec::new();
    }
    let user = cf.user_vector(history);
    let scores: Vec<f64> = items.iter().map(|&i| cf.score_with(&user, i)).collect();
    standardize(&scores)
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Cosine similarity of each candidate's embedding with the target's.
pub fn semantic_reward(items: &[u32], target: u32, catalog: &Catalog) -> Vec<f64> {
    let t = &catalog.item(target).embedding;
    items.iter().map(|&i| cosine(&catalog.item(i).embedding, t)).collect()
}

/// What dense rewards may look at besides the group itself.
#[derive(Clone, Copy)]
pub struct RewardContext<'a> {
    pub catalog: &'a Catalog,
    pub cf: Option<&'a CfBaseline>,
}

/// Rewards of a ranked group (`ranks` 1-based, aligned with `items`).
pub fn combined_reward(
    items: &[u32],
    ranks: &[usize],
    target: u32,
    history: &[u32],
    recipe: &RewardRecipe,
    ctx: &RewardContext,
) -> Result<RewardVector> {
    if items.len() != ranks.len() {
        return Err(Error::invalid("one rank per candidate required"));
    }
    let rule: Vec<f64> = items.iter().map(|&i| rule_reward(i, target)).collect();
    let is_target: Vec<bool> = items.iter().map(|&i| i == target).collect();
    let rank = if recipe.ranking {
        ranking_reward(ranks, &is_target)
    } else {
        vec![0.0; items.len()]
    };
    let mut dense = vec![0.0; items.len()];
    if recipe.collaborative != 0.0 {
        let cf = ctx
            .cf
            .ok_or_else(|| Error::invalid("collaborative reward needs a trained CF baseline"))?;
        for (d, c) in dense.iter_mut().zip(collaborative_reward(items, history, cf)) {
            *d += recipe.collaborative * c;
        }
    }
    if recipe.semantic != 0.0 {
        for (d, s) in dense.iter_mut().zip(semantic_reward(items, target, ctx.catalog)) {
            *d += recipe.semantic * s;
        }
    }
    let total = rule.iter().zip(&rank).zip(&dense).map(|((a, b), c)| a + b + c).collect();
    Ok(RewardVector {
        target,
        rule,
        rank,
        dense,
        total,
    })
}

/// Rule reward only; used for alignment-task rollouts.
pub fn rule_only_reward(items: &[u32], target: u32) -> RewardVector {
    let rule: Vec<f64> = items.iter().map(|&i| rule_reward(i, target)).collect();
    RewardVector {
        target,
        rank: vec![0.0; items.len()],
        dense: vec![0.0; items.len()],
        total: rule.clone(),
        rule,
    }
}

/// `(R - mean) / std` with the population std; all zeros when the std falls
/// below `eps_std`.
pub fn normalize_advantages(rewards: &[f64], eps_std: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    if rewards.is_empty() {
        return Vec::new();
    }
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    if std < eps_std {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recipe_names_round_trip() {
        for n in ["rule_only", "rule_rank", "collab", "semantic"] {
            assert_eq!(RewardRecipe::from_name(n).unwrap().name(), n);
        }
        assert!(RewardRecipe::from_name("bogus").is_err());
    }

    #[test]
    fn zero_norm_cosine_is_zero() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }
}
