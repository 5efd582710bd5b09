//! Error type shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum WeftError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("unknown task '{0}'")]
    UnknownTask(String),

    #[error("unknown attention site '{0}'")]
    UnknownSite(String),

    #[error("injection error: {0}")]
    Injection(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("garment region is empty")]
    EmptyGarment,

    #[error("similarity undefined: {0}")]
    UndefinedSimilarity(String),

    #[error("numerical stability: {0}")]
    NumericalStability(String),

    #[error("metric input: {0}")]
    MetricInput(String),

    #[error("backend '{id}' failed: {message}")]
    Backend { id: String, message: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, WeftError>;
