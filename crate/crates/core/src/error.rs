use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("empty pool: every position of sequence {sequence} is masked")]
    EmptyPool { sequence: usize },

    #[error("undefined loss: no labelled positions")]
    UndefinedLoss,

    #[error("tape error: {0}")]
    Tape(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("similarity undefined: vector {index} has zero norm")]
    ZeroNorm { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {needed} exceeds attention capacity {capacity}")]
    Capacity { needed: usize, capacity: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("non-finite gradient for {param}[{index}] at step {step}")]
    NonFiniteGradient {
        param: String,
        index: usize,
        step: u64,
    },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: u64, loss: f64 },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}
