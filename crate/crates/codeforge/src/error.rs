//! Crate-wide error type.

use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("character {ch:?} at position {pos} is not in the vocabulary")]
    UnknownChar { ch: char, pos: usize },

    #[error("unknown token id {id} (vocabulary size {vocab})")]
    UnknownId { id: u32, vocab: usize },

    #[error("codec error: {0}")]
    Codec(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("training aborted: loss became NaN at step {step} (lr {lr}, batch hash {batch_hash:#018x})")]
    NanLoss { step: usize, lr: f64, batch_hash: u64 },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
