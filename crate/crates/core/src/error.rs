use std::path::PathBuf;

use minirec_autodiff::AutodiffError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: line {line}: {detail}")]
    Parse {
        context: String,
        line: usize,
        detail: String,
    },
    #[error("{context}: malformed at byte offset {offset}: {detail}")]
    Format {
        context: String,
        offset: usize,
        detail: String,
    },
    #[error("incompatible {what}: expected {expected}, found {found}")]
    Incompatible {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("item {item_id} has no semantic ID")]
    MissingSid { item_id: u32 },
    #[error("unknown token id {token} (vocabulary size {vocab_size})")]
    UnknownToken { token: u32, vocab_size: usize },
    #[error("prefix {prefix:?} is not a path in the trie")]
    IllegalPrefix { prefix: Vec<u32> },
    #[error("duplicate trie path {path:?} (items {first} and {second})")]
    DuplicatePath { path: Vec<u32>, first: u32, second: u32 },
    #[error("non-finite {what}: {detail}")]
    NonFinite { what: &'static str, detail: String },
    #[error("invalid configuration: {}", .problems.join("; "))]
    Config { problems: Vec<String> },
    #[error("missing upstream artifact: {}", .path.display())]
    MissingArtifact { path: PathBuf },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
