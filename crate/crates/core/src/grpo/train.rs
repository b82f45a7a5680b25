//! The RL loop: sample groups, score them, and take clipped-surrogate steps.

use std::fmt::Write as _;
use std::path::Path;

use minirec_autodiff::{adamw_step, AdamWConfig, Graph, LrSchedule, OptimizerState};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::loss::{grpo_loss, token_log_probs, LossConfig, RolloutGroup};
use super::reward::{combined_reward, normalize_advantages, rule_only_reward, RewardContext, RewardRecipe};
use crate::catalog::Example;
use crate::decode::{
    beam_search, diversity, dynamic_sample, sample_top_k, GenerationGroup, GenerationTrace, SampleConfig, Scoring,
    SidTrie,
};
use crate::error::{Error, Result};
use crate::io;
use crate::policy::Policy;
use crate::rng;
use crate::sft::{PromptBuilder, TaskMix};
use crate::vocab::Task;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampler {
    /// Constrained beam search of width G.
    #[default]
    Beam,
    TopK,
    Dynamic,
}

impl Sampler {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "beam" => Ok(Self::Beam),
            "topk" | "top_k" => Ok(Self::TopK),
            "dynamic" => Ok(Self::Dynamic),
            _ => Err(Error::invalid(format!("unknown sampler {name:?} (expected beam, topk or dynamic)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Beam => "beam",
            Self::TopK => "topk",
            Self::Dynamic => "dynamic",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RlConfig {
    /// Rollouts per prompt; also the beam width.
    pub group_size: usize,
    pub clip_eps: f64,
    pub beta_kl: f64,
    pub lr: f64,
    pub epochs: usize,
    pub eps_std: f64,
    pub sampler: Sampler,
    pub sample: SampleConfig,
    pub scoring: Scoring,
    pub recipe: RewardRecipe,
    /// Prompts whose groups form one gradient step.
    pub prompts_per_step: usize,
    /// Optimizer steps taken on each batch of rollouts.
    pub updates_per_batch: usize,
    /// If set, each epoch visits only this many prompts (a fresh random subset).
    pub max_prompts_per_epoch: Option<usize>,
    pub seed: u64,
    /// Keep one generation trace per group.
    pub trace: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            group_size: 16,
            clip_eps: 0.2,
            beta_kl: 0.04,
            lr: 1e-5,
            epochs: 2,
            eps_std: 1e-6,
            sampler: Sampler::Beam,
            sample: SampleConfig::default(),
            scoring: Scoring::Masked,
            recipe: RewardRecipe::default(),
            prompts_per_step: 8,
            updates_per_batch: 1,
            max_prompts_per_epoch: None,
            seed: 0,
            trace: false,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.group_size < 2 {
            problems.push(format!("rl.group_size must be at least 2, got {}", self.group_size));
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            problems.push(format!("rl.clip_eps must lie in (0, 1), got {}", self.clip_eps));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            problems.push(format!("rl.beta_kl must be finite and nonnegative, got {}", self.beta_kl));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            problems.push(format!("rl.lr must be positive, got {}", self.lr));
        }
        if !(self.eps_std > 0.0) {
            problems.push(format!("rl.eps_std must be positive, got {}", self.eps_std));
        }
        if self.prompts_per_step == 0 || self.updates_per_batch == 0 {
            problems.push("rl.prompts_per_step and rl.updates_per_batch must be at least 1".into());
        }
        if self.sample.top_k == 0 || !(self.sample.temperature > 0.0) {
            problems.push("rl.top_k and rl.temperature must be positive".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config { problems })
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            clip_eps: self.clip_eps,
            beta_kl: self.beta_kl,
        }
    }
}

/// One RL prompt and the item it should produce.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RlPrompt {
    pub task: Task,
    pub tokens: Vec<u32>,
    pub target: u32,
    pub history: Vec<u32>,
}

/// Retrieval prompts for every example plus alignment prompts sized by the
/// mix, exactly as the SFT corpus is sized.
pub fn build_rl_prompts(examples: &[Example], pb: &PromptBuilder, mix: &TaskMix, seed: u64) -> Result<Vec<RlPrompt>> {
    let mut out = Vec::new();
    let w = mix.weight(Task::GenerativeRetrieval);
    let n_total = if w > 0.0 {
        for e in examples {
            out.push(RlPrompt {
                task: Task::GenerativeRetrieval,
                tokens: pb.prompt(Task::GenerativeRetrieval, &e.history, e.target)?,
                target: e.target,
                history: e.history.clone(),
            });
        }
        (examples.len() as f64 / w).round() as usize
    } else {
        examples.len()
    };
    let mut r = rng::stream(seed, rng::RL ^ 0x100);
    for task in Task::ALL {
        if task == Task::GenerativeRetrieval {
            continue;
        }
        let count = (mix.weight(task) * n_total as f64).round() as usize;
        for _ in 0..count {
            let (history, target) = match task {
                Task::SidToTitle | Task::TitleToSid => (Vec::new(), r.random_range(0..pb.catalog.len()) as u32),
                _ => {
                    if examples.is_empty() {
                        return Err(Error::invalid("history tasks need at least one split example"));
                    }
                    let e = &examples[r.random_range(0..examples.len())];
                    (e.history.clone(), e.target)
                }
            };
            out.push(RlPrompt {
                task,
                tokens: pb.prompt(task, &history, target)?,
                target,
                history,
            });
        }
    }
    Ok(out)
}

/// Generates a group for `prompt` with the configured sampler.
pub fn sample_group(policy: &Policy, prompt: &RlPrompt, tries: &SidTrie, config: &RlConfig, seed: u64) -> Result<GenerationGroup> {
    let trie = if prompt.task.emits_sid() { &tries.sid } else { &tries.title };
    let g = config.group_size;
    match config.sampler {
        Sampler::Beam => beam_search(policy, &prompt.tokens, g, trie, config.scoring),
        Sampler::TopK => sample_top_k(policy, &prompt.tokens, g, trie, &config.sample, config.scoring, seed),
        Sampler::Dynamic => dynamic_sample(
            policy,
            &prompt.tokens,
            g,
            Some(prompt.target),
            trie,
            &config.sample,
            config.scoring,
            seed,
        ),
    }
}

/// Samples, scores and normalizes one group. Old and reference log-probs
/// are recorded only for informative groups, since only they enter the loss.
pub fn rollout(
    policy: &Policy,
    reference: &Policy,
    prompt: &RlPrompt,
    tries: &SidTrie,
    ctx: &RewardContext,
    config: &RlConfig,
    seed: u64,
) -> Result<(RolloutGroup, GenerationGroup)> {
    let group = sample_group(policy, prompt, tries, config, seed)?;
    let items = group.items();
    let ranks: Vec<usize> = group.candidates.iter().map(|c| c.rank).collect();
    let rewards = if prompt.task == Task::GenerativeRetrieval {
        combined_reward(&items, &ranks, prompt.target, &prompt.history, &config.recipe, ctx)?
    } else {
        rule_only_reward(&items, prompt.target)
    };
    let advantages = normalize_advantages(&rewards.total, config.eps_std);
    let completions: Vec<Vec<u32>> = group.candidates.iter().map(|c| c.tokens.clone()).collect();
    let mut rg = RolloutGroup {
        task: prompt.task,
        prompt: prompt.tokens.clone(),
        diversity: diversity(&items),
        items,
        old_log_probs: Vec::new(),
        ref_log_probs: Vec::new(),
        completions,
        rewards,
        advantages,
    };
    if rg.is_informative() {
        rg.old_log_probs = token_log_probs(policy, policy.store(), &rg.prompt, &rg.completions)?;
        rg.ref_log_probs = token_log_probs(reference, reference.store(), &rg.prompt, &rg.completions)?;
    }
    Ok((rg, group))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RlStepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_diversity: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub loss: f64,
    pub groups: usize,
    pub informative_groups: usize,
}

#[derive(Clone, Debug)]
pub struct RlOutcome {
    pub policy: Policy,
    pub history: Vec<RlStepMetrics>,
    pub warnings: Vec<String>,
    pub traces: Vec<GenerationTrace>,
}

/// GRPO from `start`, which also serves as the frozen reference policy.
pub fn rl_train(start: &Policy, prompts: &[RlPrompt], tries: &SidTrie, ctx: &RewardContext, config: &RlConfig) -> Result<RlOutcome> {
    config.validate()?;
    if prompts.is_empty() {
        return Err(Error::invalid("RL needs at least one prompt"));
    }
    let reference = start.clone();
    let mut policy = start.clone();
    let mut opt = OptimizerState::new(policy.store(), AdamWConfig::default(), LrSchedule::Constant { lr: config.lr });
    let loss_cfg = config.loss_config();
    let mut history = Vec::new();
    let mut warnings = Vec::new();
    let mut traces = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut r = rng::stream(config.seed ^ ((epoch as u64) << 40), rng::RL);
        let mut order: Vec<usize> = (0..prompts.len()).collect();
        order.shuffle(&mut r);
        if let Some(m) = config.max_prompts_per_epoch {
            order.truncate(m.max(1));
        }
        let mut informative_in_epoch = 0;
        for chunk in order.chunks(config.prompts_per_step) {
            let mut groups = Vec::with_capacity(chunk.len());
            for &pi in chunk {
                let seed: u64 = r.random();
                let (rg, gen) = rollout(&policy, &reference, &prompts[pi], tries, ctx, config, seed)?;
                if config.trace {
                    traces.push(GenerationTrace::new(pi, &gen));
                }
                groups.push(rg);
            }
            let n_groups = groups.len();
            let mean_reward = groups.iter().map(|g| g.rewards.total.iter().sum::<f64>() / g.len() as f64).sum::<f64>()
                / n_groups as f64;
            let mean_diversity = groups.iter().map(|g| g.diversity.ratio).sum::<f64>() / n_groups as f64;
            let live: Vec<&RolloutGroup> = groups.iter().filter(|g| g.is_informative()).collect();
            informative_in_epoch += live.len();
            let mut stats = None;
            if !live.is_empty() {
                for u in 0..config.updates_per_batch {
                    let mut g = Graph::new();
                    let (loss, s) = grpo_loss(&policy, &mut g, policy.store(), &live, &loss_cfg)?;
                    let grads = g.backward(loss)?;
                    let lr = opt.current_lr()?;
                    adamw_step(policy.store_mut(), &grads, &mut opt, lr)?;
                    if u == 0 {
                        stats = Some(s);
                    }
                }
            }
            step += 1;
            let s = stats.unwrap_or_default();
            let m = RlStepMetrics {
                step,
                epoch: epoch + 1,
                mean_reward,
                mean_diversity,
                kl: s.kl,
                clip_fraction: s.clip_fraction,
                loss: s.loss,
                groups: n_groups,
                informative_groups: live.len(),
            };
            log::debug!("rl step {step}: reward {mean_reward:.4} diversity {mean_diversity:.3} informative {}/{n_groups}", live.len());
            history.push(m);
        }
        if informative_in_epoch == 0 {
            let w = format!("rl epoch {}: no informative groups; every group had constant rewards", epoch + 1);
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    Ok(RlOutcome {
        policy,
        history,
        warnings,
        traces,
    })
}

pub fn metrics_csv(history: &[RlStepMetrics]) -> String {
    let mut s = String::from("step,mean_reward,mean_diversity,kl,clip_fraction,loss\n");
    for m in history {
        let _ = writeln!(s, "{},{},{},{},{},{}", m.step, m.mean_reward, m.mean_diversity, m.kl, m.clip_fraction, m.loss);
    }
    s
}

pub fn write_metrics_csv(path: &Path, history: &[RlStepMetrics]) -> Result<()> {
    io::write_bytes(path, metrics_csv(history).as_bytes())
}
