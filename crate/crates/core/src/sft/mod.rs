//! Mixed-task supervised corpus and masked next-token training.

mod corpus;
mod train;

pub use corpus::{
    build_alignment_examples, build_corpus, build_generative_retrieval, PromptBuilder, TaskMix, TrainingExample,
};
pub use train::{
    eval_loss, loss_csv, masked_loss, new_optimizer, sft_steps, sft_train, write_loss_csv, EpochLoss, SftConfig,
    SftOutcome,
};

use std::path::Path;

use crate::error::Result;
use crate::io;

pub fn save_corpus(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    io::write_jsonl(path, examples)
}

pub fn load_corpus(path: &Path) -> Result<Vec<TrainingExample>> {
    checked(io::read_jsonl(path)?)
}

/// Parses corpus JSONL text, validating every example.
pub fn parse_corpus(text: &str) -> Result<Vec<TrainingExample>> {
    checked(io::from_jsonl(text, "corpus")?)
}

fn checked(examples: Vec<TrainingExample>) -> Result<Vec<TrainingExample>> {
    for e in &examples {
        e.validate()?;
    }
    Ok(examples)
}
