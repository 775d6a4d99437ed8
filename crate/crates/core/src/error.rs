use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum RaveError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("degenerate attention row {row}: {reason}")]
    DegenerateRow { row: usize, reason: String },

    #[error("vocabulary exhausted: {0}")]
    Vocabulary(String),

    #[error("incomplete attention trace: {0}")]
    IncompleteTrace(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, RaveError>;

impl RaveError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RaveError::Io {
            path: path.into(),
            source,
        }
    }
}
