use std::path::PathBuf;

use crate::model::Checkpoint;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint file could not be decoded.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Training produced a non-finite loss. Carries the weights from the
    /// last step whose loss was finite.
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged {
        step: usize,
        loss: f32,
        last_good: Box<Checkpoint>,
    },

    /// Stored aggregates disagree with the records they summarize.
    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
