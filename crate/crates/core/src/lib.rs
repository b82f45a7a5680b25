//! Generative recommendation over semantic IDs.

pub mod catalog;
pub mod cf;
pub mod config;
pub mod decode;
pub mod eval;
pub mod grpo;
mod error;
pub mod io;
pub mod pipeline;
pub mod policy;
pub mod rng;
pub mod sft;
pub mod tokenizer;
pub mod vocab;

pub use error::{Error, Result};
