//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DpaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value rejected (index {index})")]
    NonFinite { index: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("token id {id} out of range for vocab size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("empty token sequence")]
    EmptySequence,

    #[error("position {pos} out of range for sequence length {len}")]
    PositionOutOfRange { pos: usize, len: usize },

    #[error("component out of range: {0}")]
    Component(String),

    #[error("invalid path weights: {0}")]
    PathWeights(String),

    #[error("model file format error: {0}")]
    Format(String),

    #[error("undefined instance: {0}")]
    UndefinedInstance(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DpaError>;
