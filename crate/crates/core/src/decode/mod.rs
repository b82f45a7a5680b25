//! Constrained generation over the catalog's SID and title tries.

mod search;
mod trie;

pub use search::{
    beam_search, constrained_log_prob, dynamic_draws, dynamic_sample, sample_raw, sample_top_k, select_dynamic,
    Candidate, GenerationGroup, SampleConfig, Scoring,
};
pub use trie::{SidTrie, Trie};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityStat {
    pub unique: usize,
    pub group_size: usize,
    pub ratio: f64,
}

/// Share of distinct items among a group's candidates.
pub fn diversity(items: &[u32]) -> DiversityStat {
    let unique = items.iter().collect::<HashSet<_>>().len();
    let g = items.len();
    DiversityStat {
        unique,
        group_size: g,
        ratio: if g == 0 { 0.0 } else { unique as f64 / g as f64 },
    }
}

/// One line of a generation trace dump.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub prompt_id: usize,
    pub candidates: Vec<u32>,
    pub scores: Vec<f64>,
    pub ranks: Vec<usize>,
}

impl GenerationTrace {
    pub fn new(prompt_id: usize, group: &GenerationGroup) -> Self {
        Self {
            prompt_id,
            candidates: group.items(),
            scores: group.candidates.iter().map(|c| c.score).collect(),
            ranks: group.candidates.iter().map(|c| c.rank).collect(),
        }
    }
}
