//! Instruction-style examples: a token prompt followed by a masked-in response.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, Example};
use crate::error::{Error, Result};
use crate::rng;
use crate::tokenizer::SidTable;
use crate::vocab::{Task, VocabLayout, BOS, EOS, ITEM_SEP, SEP};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub tokens: Vec<u32>,
    /// True exactly on response tokens, which are the only ones scored.
    pub mask: Vec<bool>,
    pub task: Task,
}

impl TrainingExample {
    pub fn new(prompt: Vec<u32>, response: Vec<u32>, task: Task) -> Result<Self> {
        if prompt.is_empty() || response.is_empty() {
            return Err(Error::invalid("examples need a prompt and a response"));
        }
        let mut mask = vec![false; prompt.len()];
        mask.resize(prompt.len() + response.len(), true);
        let mut tokens = prompt;
        tokens.extend(response);
        Ok(Self { tokens, mask, task })
    }

    pub fn validate(&self) -> Result<()> {
        if self.mask.len() != self.tokens.len() {
            return Err(Error::invalid(format!(
                "mask length {} differs from sequence length {}",
                self.mask.len(),
                self.tokens.len()
            )));
        }
        if self.mask.first() != Some(&false) || !self.mask.iter().any(|&m| m) {
            return Err(Error::invalid("mask must leave the first token out and include at least one token"));
        }
        Ok(())
    }

    pub fn prompt_len(&self) -> usize {
        self.mask.iter().position(|&m| m).unwrap_or(self.tokens.len())
    }

    pub fn prompt(&self) -> &[u32] {
        &self.tokens[..self.prompt_len()]
    }

    pub fn response(&self) -> &[u32] {
        &self.tokens[self.prompt_len()..]
    }

    pub fn n_scored(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Sampling weights over the five task families.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskMix {
    weights: BTreeMap<Task, f64>,
}

impl Default for TaskMix {
    fn default() -> Self {
        Self::new(&[
            (Task::GenerativeRetrieval, 0.6),
            (Task::TextHistoryToSid, 0.1),
            (Task::SidHistoryToTitle, 0.1),
            (Task::SidToTitle, 0.1),
            (Task::TitleToSid, 0.1),
        ])
        .expect("valid default")
    }
}

impl TaskMix {
    /// Weights must be nonnegative and sum to 1 (within 1e-9); unlisted tasks get 0.
    pub fn new(pairs: &[(Task, f64)]) -> Result<Self> {
        let mut weights: BTreeMap<Task, f64> = Task::ALL.iter().map(|&t| (t, 0.0)).collect();
        for &(t, w) in pairs {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::invalid(format!("weight for {} must be finite and nonnegative", t.name())));
            }
            weights.insert(t, w);
        }
        let total: f64 = weights.values().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("task weights sum to {total}, expected 1")));
        }
        Ok(Self { weights })
    }

    /// Generative retrieval only.
    pub fn retrieval_only() -> Self {
        Self::new(&[(Task::GenerativeRetrieval, 1.0)]).expect("valid")
    }

    pub fn weight(&self, t: Task) -> f64 {
        self.weights[&t]
    }

    pub fn has_alignment(&self) -> bool {
        Task::ALL.iter().any(|&t| t != Task::GenerativeRetrieval && self.weight(t) > 0.0)
    }
}

/// Prompt pieces shared by the corpus builder and RL.
pub struct PromptBuilder<'a> {
    pub catalog: &'a Catalog,
    pub sids: &'a SidTable,
    pub layout: &'a VocabLayout,
    pub max_len: usize,
}

impl<'a> PromptBuilder<'a> {
    pub fn sid(&self, item: u32) -> Result<Vec<u32>> {
        self.layout.item_tokens(self.sids, item)
    }

    pub fn title(&self, item: u32) -> Vec<u32> {
        self.layout.title_tokens(self.catalog, item)
    }

    /// `BOS task <items...> SEP`, dropping the oldest items if the prompt
    /// plus a response of `reserve` tokens would not fit.
    fn history_prompt(&self, task: Task, history: &[u32], as_titles: bool, reserve: usize) -> Result<Vec<u32>> {
        let mut pieces = Vec::with_capacity(history.len());
        for &h in history {
            if as_titles {
                let mut t = self.title(h);
                t.push(ITEM_SEP);
                pieces.push(t);
            } else {
                pieces.push(self.sid(h)?);
            }
        }
        let budget = self.max_len.saturating_sub(3 + reserve);
        let mut used = 0;
        let mut start = pieces.len();
        while start > 0 && used + pieces[start - 1].len() <= budget {
            start -= 1;
            used += pieces[start].len();
        }
        if start == pieces.len() && !pieces.is_empty() {
            return Err(Error::invalid("max_len too small for a single history item"));
        }
        let mut p = vec![BOS, self.layout.task_token(task)];
        for piece in &pieces[start..] {
            p.extend_from_slice(piece);
        }
        p.push(SEP);
        Ok(p)
    }

    /// Longest SID or title response, plus EOS.
    fn reserve(&self) -> usize {
        let title = self.catalog.items().iter().map(|i| i.title_tokens.len()).max().unwrap_or(0);
        title.max(self.sids.n_levels() + 1) + 1
    }

    pub fn prompt(&self, task: Task, history: &[u32], item: u32) -> Result<Vec<u32>> {
        let reserve = self.reserve();
        match task {
            Task::GenerativeRetrieval | Task::SidHistoryToTitle => self.history_prompt(task, history, false, reserve),
            Task::TextHistoryToSid => self.history_prompt(task, history, true, reserve),
            Task::SidToTitle => {
                let mut p = vec![BOS, self.layout.task_token(task)];
                p.extend(self.sid(item)?);
                p.push(SEP);
                Ok(p)
            }
            Task::TitleToSid => {
                let mut p = vec![BOS, self.layout.task_token(task)];
                p.extend(self.title(item));
                p.push(SEP);
                Ok(p)
            }
        }
    }

    /// The response for `item` under `task`, ending in EOS.
    pub fn response(&self, task: Task, item: u32) -> Result<Vec<u32>> {
        let mut r = if task.emits_sid() { self.sid(item)? } else { self.title(item) };
        r.push(EOS);
        Ok(r)
    }

    pub fn example(&self, task: Task, history: &[u32], item: u32) -> Result<TrainingExample> {
        TrainingExample::new(self.prompt(task, history, item)?, self.response(task, item)?, task)
    }
}

/// One example per split example: history SIDs in, target SID out.
pub fn build_generative_retrieval(examples: &[Example], pb: &PromptBuilder) -> Result<Vec<TrainingExample>> {
    examples
        .iter()
        .map(|e| pb.example(Task::GenerativeRetrieval, &e.history, e.target))
        .collect()
}

/// Alignment families sized relative to `n_retrieval` retrieval examples
/// so that family counts follow the mix. History tasks draw split examples,
/// item tasks draw catalog items, uniformly with replacement.
pub fn build_alignment_examples(
    examples: &[Example],
    pb: &PromptBuilder,
    mix: &TaskMix,
    n_total: usize,
    seed: u64,
) -> Result<Vec<TrainingExample>> {
    let mut r = rng::stream(seed, rng::CORPUS);
    let mut out = Vec::new();
    for task in Task::ALL {
        if task == Task::GenerativeRetrieval {
            continue;
        }
        let count = (mix.weight(task) * n_total as f64).round() as usize;
        for _ in 0..count {
            let ex = match task {
                Task::SidToTitle | Task::TitleToSid => {
                    let item = r.random_range(0..pb.catalog.len()) as u32;
                    pb.example(task, &[], item)?
                }
                _ => {
                    if examples.is_empty() {
                        return Err(Error::invalid("history tasks need at least one split example"));
                    }
                    let e = &examples[r.random_range(0..examples.len())];
                    pb.example(task, &e.history, e.target)?
                }
            };
            out.push(ex);
        }
    }
    Ok(out)
}

/// Full corpus for a set of split examples under a mix. Every retrieval
/// example is used once; the corpus size is set so retrieval has its weight.
pub fn build_corpus(examples: &[Example], pb: &PromptBuilder, mix: &TaskMix, seed: u64) -> Result<Vec<TrainingExample>> {
    let w = mix.weight(Task::GenerativeRetrieval);
    let (mut out, n_total) = if w > 0.0 {
        let gr = build_generative_retrieval(examples, pb)?;
        let n = (gr.len() as f64 / w).round() as usize;
        (gr, n)
    } else {
        (Vec::new(), examples.len())
    };
    out.extend(build_alignment_examples(examples, pb, mix, n_total, seed)?);
    Ok(out)
}
