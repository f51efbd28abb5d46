use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("optimizer step without gradients: {0}")]
    MissingGradient(String),

    #[error("matrix is numerically singular (condition estimate {condition:e})")]
    Singular { condition: f64 },

    #[error("matrix is not positive definite")]
    NotPositiveDefinite,

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("span {start}..{end} lies outside text of length {len}")]
    Range { start: usize, end: usize, len: usize },

    #[error("span {start}..{end} does not intersect any token")]
    Alignment { start: usize, end: usize },

    #[error("instance {id}: {reason}")]
    Invalid { id: String, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("input of {len} tokens exceeds maximum length {max}")]
    Length { len: usize, max: usize },

    #[error("operation requires the {expected} setting")]
    Mode { expected: &'static str },

    #[error("configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("non-deterministic objective: {0}")]
    NonDeterministic(String),

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
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
