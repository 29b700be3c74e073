use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corpus is empty after filtering")]
    EmptyCorpus,

    #[error("token `{0}` is not in the vocabulary")]
    UnknownToken(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    InvalidTokenId { id: usize, size: usize },

    #[error("sequence of length {len} exceeds horizon {horizon}")]
    SequenceTooLong { len: usize, horizon: usize },

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite {what} during {phase} at step {step}")]
    NonFinite {
        phase: String,
        step: usize,
        what: String,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn non_finite(phase: impl Into<String>, step: usize, what: impl Into<String>) -> Self {
        Error::NonFinite {
            phase: phase.into(),
            step,
            what: what.into(),
        }
    }
}
