use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ClearError>;

/// Errors surfaced by the library.
///
/// Variants split into two families: validation failures (bad input, bad
/// configuration, mismatched artifacts) and runtime failures (I/O, numeric
/// divergence). The CLI maps them to distinct exit codes.
#[derive(Debug, Error)]
pub enum ClearError {
    #[error("{0}")]
    Invalid(String),

    #[error("{message} at line {line}")]
    Parse { line: usize, message: String },

    #[error("duplicate id {0:?}")]
    DuplicateId(String),

    #[error("empty POS set for task {0}")]
    EmptyPosSet(String),

    #[error("N-N pairing forbidden")]
    NegativePair,

    #[error("stage mismatch: expected {expected}, found {found}")]
    StageMismatch { expected: String, found: String },

    #[error("uninitialized running statistics")]
    UninitializedStatistics,

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("unknown config key {key:?} at line {line}")]
    UnknownConfigKey { key: String, line: usize },

    #[error("non-finite loss at {stage} epoch {epoch} batch {batch}")]
    Divergence {
        stage: String,
        epoch: usize,
        batch: usize,
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

impl ClearError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ClearError::Invalid(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClearError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            ClearError::Divergence { .. } | ClearError::Io { .. } | ClearError::Json(_)
        )
    }
}
