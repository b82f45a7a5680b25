//! Hit rate and NDCG for single-target next-item prediction.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::catalog::Example;
use crate::decode::{beam_search, diversity, Scoring, Trie};
use crate::error::{Error, Result};
use crate::io;
use crate::policy::Policy;
use crate::sft::PromptBuilder;
use crate::vocab::Task;

pub const DEFAULT_KS: [usize; 3] = [3, 5, 10];

/// A metric averaged over examples, with the number of ranked lists that
/// were shorter than the cutoff (those count with their full list).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AtK {
    pub value: f64,
    pub short_lists: usize,
}

fn rank_of(list: &[u32], target: u32) -> Option<usize> {
    list.iter().position(|&i| i == target).map(|p| p + 1)
}

fn check_lens(lists: &[Vec<u32>], targets: &[u32], k: usize) -> Result<()> {
    if lists.len() != targets.len() {
        return Err(Error::invalid(format!("{} ranked lists for {} targets", lists.len(), targets.len())));
    }
    if lists.is_empty() {
        return Err(Error::invalid("no examples to score"));
    }
    if k == 0 {
        return Err(Error::invalid("cutoff K must be at least 1"));
    }
    Ok(())
}

fn mean_at_k(lists: &[Vec<u32>], targets: &[u32], k: usize, gain: impl Fn(usize) -> f64) -> Result<AtK> {
    check_lens(lists, targets, k)?;
    let mut total = 0.0;
    let mut short = 0;
    for (l, &t) in lists.iter().zip(targets) {
        if l.len() < k {
            short += 1;
        }
        if let Some(r) = rank_of(l, t).filter(|&r| r <= k) {
            total += gain(r);
        }
    }
    Ok(AtK {
        value: total / lists.len() as f64,
        short_lists: short,
    })
}

/// Share of examples whose target is among the first `k` items.
pub fn hr_at_k(lists: &[Vec<u32>], targets: &[u32], k: usize) -> Result<AtK> {
    mean_at_k(lists, targets, k, |_| 1.0)
}

/// Mean of `1 / log2(rank + 1)` over examples whose target ranks within `k`.
pub fn ndcg_at_k(lists: &[Vec<u32>], targets: &[u32], k: usize) -> Result<AtK> {
    mean_at_k(lists, targets, k, |r| 1.0 / ((r + 1) as f64).log2())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub run_id: String,
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub n_examples: usize,
    pub hr: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub mean_diversity: f64,
    /// Lists shorter than the largest cutoff.
    pub short_lists: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub run_id: String,
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
}

impl MetricsReport {
    pub fn from_lists(lists: &[Vec<u32>], targets: &[u32], ks: &[usize], meta: &RunMeta) -> Result<Self> {
        let mut hr = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        let mut short = 0;
        for &k in ks {
            let h = hr_at_k(lists, targets, k)?;
            hr.insert(k, h.value);
            ndcg.insert(k, ndcg_at_k(lists, targets, k)?.value);
            short = short.max(h.short_lists);
        }
        let mean_diversity = lists.iter().map(|l| if l.is_empty() { 0.0 } else { diversity(l).ratio }).sum::<f64>()
            / lists.len() as f64;
        Ok(Self {
            run_id: meta.run_id.clone(),
            stage: meta.stage.clone(),
            seed: meta.seed,
            config_hash: meta.config_hash.clone(),
            n_examples: lists.len(),
            hr,
            ndcg,
            mean_diversity,
            short_lists: short,
        })
    }

    /// HR and NDCG non-decreasing in K, NDCG ≤ HR, everything in [0, 1].
    pub fn is_consistent(&self) -> bool {
        let mono = |m: &BTreeMap<usize, f64>| m.values().collect::<Vec<_>>().windows(2).all(|w| w[0] <= w[1]);
        let bounded = self
            .hr
            .iter()
            .all(|(k, &h)| (0.0..=1.0).contains(&h) && self.ndcg.get(k).is_some_and(|&n| (0.0..=h + 1e-12).contains(&n)));
        mono(&self.hr) && mono(&self.ndcg) && bounded
    }

    pub fn hr_at(&self, k: usize) -> f64 {
        self.hr.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::invalid(format!("report serialization: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_bytes(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = io::read_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            context: path.display().to_string(),
            line: e.line(),
            detail: e.to_string(),
        })
    }
}

pub const LEDGER_HEADER: &str = "run_id,stage,hr@3,hr@5,hr@10,ndcg@3,ndcg@5,ndcg@10,diversity";

pub fn ledger_row(r: &MetricsReport) -> String {
    let mut s = format!("{},{}", r.run_id, r.stage);
    for k in DEFAULT_KS {
        let _ = write!(s, ",{}", r.hr_at(k));
    }
    for k in DEFAULT_KS {
        let _ = write!(s, ",{}", r.ndcg_at(k));
    }
    let _ = write!(s, ",{}", r.mean_diversity);
    s
}

/// Appends one row to a CSV run ledger, writing the header first if the
/// file is new.
pub fn append_ledger(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut text = if path.exists() {
        io::read_string(path)?
    } else {
        format!("{LEDGER_HEADER}\n")
    };
    text.push_str(&ledger_row(report));
    text.push('\n');
    io::write_bytes(path, text.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beam_width: usize,
    pub ks: Vec<usize>,
    pub scoring: Scoring,
    /// Evaluate only the first this many examples.
    pub max_examples: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_width: 16,
            ks: DEFAULT_KS.to_vec(),
            scoring: Scoring::Masked,
            max_examples: None,
        }
    }
}

impl EvalConfig {
    pub fn k_max(&self) -> usize {
        self.ks.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ks.is_empty() || self.ks.contains(&0) {
            return Err(Error::Config {
                problems: vec!["eval.ks must list positive cutoffs".into()],
            });
        }
        if self.beam_width < self.k_max() {
            return Err(Error::Config {
                problems: vec![format!(
                    "eval.beam_width {} is below the largest cutoff {}",
                    self.beam_width,
                    self.k_max()
                )],
            });
        }
        Ok(())
    }
}

/// Constrained beam decode for every example; returns the ranked item lists.
pub fn rank_with_policy(policy: &Policy, examples: &[Example], pb: &PromptBuilder, trie: &Trie, config: &EvalConfig) -> Result<Vec<Vec<u32>>> {
    config.validate()?;
    let n = config.max_examples.map_or(examples.len(), |m| m.min(examples.len()));
    examples[..n]
        .iter()
        .map(|e| {
            let prompt = pb.prompt(Task::GenerativeRetrieval, &e.history, e.target)?;
            Ok(beam_search(policy, &prompt, config.beam_width, trie, config.scoring)?.items())
        })
        .collect()
}

pub fn evaluate_model(
    policy: &Policy,
    examples: &[Example],
    pb: &PromptBuilder,
    trie: &Trie,
    config: &EvalConfig,
    meta: &RunMeta,
) -> Result<MetricsReport> {
    let lists = rank_with_policy(policy, examples, pb, trie, config)?;
    let targets: Vec<u32> = examples[..lists.len()].iter().map(|e| e.target).collect();
    MetricsReport::from_lists(&lists, &targets, &config.ks, meta)
}

/// Items by descending frequency as train targets, ties by id. Items never
/// seen come last, also by id.
pub fn popularity_baseline(train: &[Example], n_items: usize) -> Vec<u32> {
    let mut counts = vec![0usize; n_items];
    for e in train {
        if let Some(c) = counts.get_mut(e.target as usize) {
            *c += 1;
        }
    }
    let mut order: Vec<u32> = (0..n_items as u32).collect();
    order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    order
}

/// One fixed ranking applied to every example, truncated to `k_max`.
pub fn evaluate_static(ranking: &[u32], examples: &[Example], ks: &[usize], meta: &RunMeta) -> Result<MetricsReport> {
    let k_max = ks.iter().copied().max().unwrap_or(0);
    let top: Vec<u32> = ranking.iter().take(k_max).copied().collect();
    let lists = vec![top; examples.len()];
    let targets: Vec<u32> = examples.iter().map(|e| e.target).collect();
    MetricsReport::from_lists(&lists, &targets, ks, meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ledger_row_has_one_field_per_column() {
        let r = MetricsReport::from_lists(&[vec![1, 2, 3]], &[2], &DEFAULT_KS, &RunMeta::default()).unwrap();
        assert_eq!(ledger_row(&r).split(',').count(), LEDGER_HEADER.split(',').count());
    }
}
