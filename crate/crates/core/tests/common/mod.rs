//! Small catalogs and policies shared by the integration tests.
#![allow(dead_code)]

pub mod oracles;

use minirec_core::catalog::{generate_catalog, Catalog, TITLE_VOCAB};
use minirec_core::decode::SidTrie;
use minirec_core::policy::{Policy, PolicyConfig};
use minirec_core::sft::{sft_steps, PromptBuilder, TrainingExample};
use minirec_core::tokenizer::{disambiguate_collisions, fit_tokenizer, SidAssignment, SidTable, TokenizerConfig};
use minirec_core::vocab::{Task, VocabLayout, BOS, SEP};

pub struct Fixture {
    pub catalog: Catalog,
    pub sids: SidTable,
    pub layout: VocabLayout,
    pub tries: SidTrie,
    pub policy: Policy,
}

pub fn tiny_config(seed: u64) -> PolicyConfig {
    PolicyConfig {
        n_layers: 2,
        width: 32,
        n_heads: 2,
        ff_width: 64,
        max_len: 64,
        seed,
        tie_embeddings: true,
    }
}

/// A catalog of `n_items` tokenized with `k` codes per level and an untrained
/// two-layer policy.
pub fn fixture(n_items: usize, k: usize, seed: u64) -> Fixture {
    let catalog = generate_catalog(seed, n_items, 8, 4.min(n_items)).unwrap();
    let cfg = TokenizerConfig {
        k,
        lloyd_iters: 20,
        ..Default::default()
    };
    let sids = fit_tokenizer(&catalog, &cfg, seed).unwrap().sids;
    let layout = VocabLayout::for_table(TITLE_VOCAB, &sids);
    let tries = SidTrie::build(&sids, &layout, &catalog).unwrap();
    let policy = Policy::init(tiny_config(seed), layout.clone()).unwrap();
    Fixture {
        catalog,
        sids,
        layout,
        tries,
        policy,
    }
}

/// A catalog whose SIDs are set by hand: item `i` gets `codes[i]`, with
/// collisions numbered in item order.
pub fn fixture_with_codes(codes: &[[u32; 3]], k: usize, seed: u64) -> Fixture {
    let catalog = generate_catalog(seed, codes.len(), 8, 1).unwrap();
    let entries = codes
        .iter()
        .enumerate()
        .map(|(i, c)| SidAssignment {
            item_id: i as u32,
            codes: c.to_vec(),
            residual: Vec::new(),
            disambiguation: 0,
        })
        .collect();
    let sids = SidTable::new(disambiguate_collisions(entries), k).unwrap();
    let layout = VocabLayout::for_table(TITLE_VOCAB, &sids);
    let tries = SidTrie::build(&sids, &layout, &catalog).unwrap();
    let policy = Policy::init(tiny_config(seed), layout.clone()).unwrap();
    Fixture {
        catalog,
        sids,
        layout,
        tries,
        policy,
    }
}

impl Fixture {
    pub fn builder(&self) -> PromptBuilder<'_> {
        PromptBuilder {
            catalog: &self.catalog,
            sids: &self.sids,
            layout: &self.layout,
            max_len: self.policy.config().max_len,
        }
    }

    /// Retrieval prompt for a history.
    pub fn prompt(&self, history: &[u32]) -> Vec<u32> {
        let p = self.builder().prompt(Task::GenerativeRetrieval, history, 0).unwrap();
        assert_eq!(p[0], BOS);
        assert_eq!(*p.last().unwrap(), SEP);
        p
    }

    /// Skews the policy toward fixed answers so distributions are far from
    /// uniform.
    pub fn skew(&mut self, pairs: &[(&[u32], u32)], steps: usize) {
        let pb = self.builder();
        let examples: Vec<TrainingExample> = pairs
            .iter()
            .map(|(h, t)| pb.example(Task::GenerativeRetrieval, h, *t).unwrap())
            .collect();
        sft_steps(&mut self.policy, &examples, steps, examples.len(), 3e-3, 0).unwrap();
    }
}
