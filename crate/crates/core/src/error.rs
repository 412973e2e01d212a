use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input")]
    EmptyInput,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("absolute continuity violated at index {0}: q is zero where p is positive")]
    AbsoluteContinuity(usize),

    #[error("retriever frozen")]
    RetrieverFrozen,

    #[error("leave-one-out undefined for fewer than two documents")]
    LeaveOneOutUndefined,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("excluded section: {0}")]
    ExcludedSection(String),

    #[error("chunk too short: need at least {needed} tokens, got {got}")]
    ChunkTooShort { needed: usize, got: usize },

    #[error("duplicate id: {0}")]
    DuplicateId(String),

    #[error("invalid config key `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("invalid document `{id}`: {reason}")]
    InvalidDocument { id: String, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("indices share dump date {0}")]
    SameDumpDate(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
