//! Masked next-token training with per-epoch validation and early stopping.

use std::fmt::Write as _;
use std::path::Path;

use minirec_autodiff::{adamw_step, AdamWConfig, Graph, LrSchedule, OptimizerState, ParamStore, Var};
use rand::seq::SliceRandom;

use super::corpus::TrainingExample;
use crate::error::{Error, Result};
use crate::io;
use crate::policy::{Checkpoint, Policy};
use crate::rng;

#[derive(Clone, Debug, PartialEq)]
pub struct SftConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 3e-4,
            patience: 1,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLoss {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Clone, Debug)]
pub struct SftOutcome {
    /// Parameters of the epoch with the lowest validation loss.
    pub best: Policy,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub history: Vec<EpochLoss>,
    /// State after the last completed epoch, for resuming.
    pub last: Checkpoint,
    pub stopped_early: bool,
    pub aborted: Option<String>,
}

/// Mean cross-entropy over the response tokens of `batch`, on the tape.
pub fn masked_loss(policy: &Policy, g: &mut Graph, store: &ParamStore, batch: &[&TrainingExample]) -> Result<Var> {
    let seqs: Vec<&[u32]> = batch.iter().map(|e| e.tokens.as_slice()).collect();
    let packed = policy.pack(&seqs)?;
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, e) in batch.iter().enumerate() {
        e.validate()?;
        for t in 1..e.tokens.len() {
            if e.mask[t] {
                rows.push(packed.row(s, t - 1));
                targets.push(e.tokens[t] as usize);
            }
        }
    }
    let h = policy.hidden(g, store, &packed)?;
    let logits = policy.logits_at(g, store, h, &rows)?;
    let w = vec![1.0 / targets.len() as f64; targets.len()];
    Ok(g.cross_entropy(logits, &targets, &w)?)
}

/// Mean masked cross-entropy per scored token; no parameter is touched.
pub fn eval_loss(policy: &Policy, examples: &[TrainingExample], batch_size: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples to evaluate"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&TrainingExample> = chunk.iter().collect();
        let n: usize = chunk.iter().map(|e| e.n_scored()).sum();
        let mut g = Graph::new();
        let loss = masked_loss(policy, &mut g, policy.store(), &refs)?;
        total += g.value(loss).item() * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut r = rng::stream(seed ^ (epoch << 40), rng::SFT_ORDER);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut r);
    order
}

fn is_non_finite(e: &Error) -> bool {
    matches!(
        e,
        Error::Autodiff(
            minirec_autodiff::AutodiffError::NonFinite { .. } | minirec_autodiff::AutodiffError::NonFiniteGradient { .. }
        )
    )
}

/// One pass over `train` in the seeded order for `epoch`; returns the mean
/// batch loss.
fn run_epoch(
    policy: &mut Policy,
    opt: &mut OptimizerState,
    train: &[TrainingExample],
    config: &SftConfig,
    epoch: u64,
) -> Result<f64> {
    let order = epoch_order(train.len(), config.seed, epoch);
    let mut total = 0.0;
    let mut batches = 0;
    for chunk in order.chunks(config.batch_size.max(1)) {
        let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &train[i]).collect();
        let mut g = Graph::new();
        let loss = masked_loss(policy, &mut g, policy.store(), &batch)?;
        total += g.value(loss).item();
        batches += 1;
        let grads = g.backward(loss)?;
        let lr = opt.current_lr()?;
        adamw_step(policy.store_mut(), &grads, opt, lr)?;
    }
    Ok(total / batches.max(1) as f64)
}

pub fn new_optimizer(policy: &Policy, config: &SftConfig, n_train: usize) -> OptimizerState {
    let steps_per_epoch = n_train.div_ceil(config.batch_size.max(1)).max(1);
    let total = (steps_per_epoch * config.epochs.max(1)) as u64;
    OptimizerState::new(
        policy.store(),
        AdamWConfig::default(),
        LrSchedule::Cosine {
            base_lr: config.lr,
            total_steps: total,
        },
    )
}

/// Trains from `start` (fresh or resumed) until the epoch budget is spent or
/// validation loss fails to improve for `patience` epochs.
pub fn sft_train(
    start: Checkpoint,
    train: &[TrainingExample],
    valid: &[TrainingExample],
    config: &SftConfig,
) -> Result<SftOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("SFT needs at least one training example"));
    }
    if valid.is_empty() {
        return Err(Error::invalid("SFT needs validation examples for early stopping"));
    }
    let Checkpoint {
        mut policy,
        optimizer,
        epochs_done,
    } = start;
    let mut opt = optimizer.unwrap_or_else(|| new_optimizer(&policy, config, train.len()));
    let mut best = policy.clone();
    let mut best_valid = eval_loss(&policy, valid, 64)?;
    let mut best_epoch = epochs_done as usize;
    let mut history = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    let mut aborted = None;
    let mut done = epochs_done;
    for epoch in epochs_done as usize..config.epochs {
        let snapshot = (policy.clone(), opt.clone());
        let result = run_epoch(&mut policy, &mut opt, train, config, epoch as u64)
            .and_then(|tl| Ok((tl, eval_loss(&policy, valid, 64)?)));
        let (train_loss, valid_loss) = match result {
            Ok(v) => v,
            Err(e) if is_non_finite(&e) => {
                log::warn!("SFT aborted in epoch {}: {e}", epoch + 1);
                aborted = Some(format!("epoch {}: {e}", epoch + 1));
                (policy, opt) = snapshot;
                break;
            }
            Err(e) => return Err(e),
        };
        done = epoch as u64 + 1;
        log::info!("sft epoch {} train {train_loss:.4} valid {valid_loss:.4}", epoch + 1);
        history.push(EpochLoss {
            epoch: epoch + 1,
            train_loss,
            valid_loss,
        });
        if valid_loss < best_valid {
            best_valid = valid_loss;
            best = policy.clone();
            best_epoch = epoch + 1;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience.max(1) {
                stopped_early = epoch + 1 < config.epochs;
                break;
            }
        }
    }
    Ok(SftOutcome {
        best,
        best_epoch,
        best_valid_loss: best_valid,
        history,
        last: Checkpoint {
            policy,
            optimizer: Some(opt),
            epochs_done: done,
        },
        stopped_early,
        aborted,
    })
}

/// Plain minibatch steps with a constant learning rate (no validation).
/// Returns the loss of every step.
pub fn sft_steps(policy: &mut Policy, examples: &[TrainingExample], steps: usize, batch_size: usize, lr: f64, seed: u64) -> Result<Vec<f64>> {
    if examples.is_empty() {
        return Err(Error::invalid("no examples"));
    }
    let mut opt = OptimizerState::new(policy.store(), AdamWConfig::default(), LrSchedule::Constant { lr });
    let cfg = SftConfig {
        batch_size,
        seed,
        ..Default::default()
    };
    let mut losses = Vec::with_capacity(steps);
    let mut epoch = 0;
    while losses.len() < steps {
        let order = epoch_order(examples.len(), cfg.seed, epoch);
        for chunk in order.chunks(batch_size.max(1)) {
            if losses.len() == steps {
                break;
            }
            let batch: Vec<&TrainingExample> = chunk.iter().map(|&i| &examples[i]).collect();
            let mut g = Graph::new();
            let loss = masked_loss(policy, &mut g, policy.store(), &batch)?;
            losses.push(g.value(loss).item());
            let grads = g.backward(loss)?;
            adamw_step(policy.store_mut(), &grads, &mut opt, lr)?;
        }
        epoch += 1;
    }
    Ok(losses)
}

pub fn loss_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,train_loss,valid_loss\n");
    for h in history {
        let _ = writeln!(s, "{},{},{}", h.epoch, h.train_loss, h.valid_loss);
    }
    s
}

pub fn write_loss_csv(path: &Path, history: &[EpochLoss]) -> Result<()> {
    io::write_bytes(path, loss_csv(history).as_bytes())
}
