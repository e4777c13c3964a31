use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty input after tokenization")]
    EmptyText,

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corpus contains a single style class; both labels are required")]
    SingleClass,

    #[error("all positions are masked; nothing to pool")]
    NothingToPool,

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("soft token row {row} sums to {sum}, expected 1")]
    UnnormalizedRow { row: usize, sum: f64 },

    #[error("frozen component `{0}` was modified during training")]
    FrozenModified(String),

    #[error("missing prerequisite: stage `{0}` has no usable checkpoint")]
    MissingStage(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
