use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("parse error: {message}, line {line}")]
    Parse { line: usize, message: String },

    #[error("schema error: {message}, line {line}")]
    Schema { line: usize, message: String },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("token {token:?} is not in the vocabulary")]
    UnknownToken { token: String },

    #[error("token index {index} out of range for vocabulary of size {size}")]
    TokenOutOfRange { index: usize, size: usize },

    #[error("class {class} has {available} samples, need {required}")]
    InsufficientClass { class: usize, available: usize, required: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("step {step}: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn at_step(self, step: usize) -> Self {
        Error::Step { step, source: Box::new(self) }
    }
}
