//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PacoError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, PacoError>;

impl PacoError {
    pub fn shape(msg: impl Into<String>) -> Self {
        PacoError::ShapeMismatch(msg.into())
    }

    pub fn arg(msg: impl Into<String>) -> Self {
        PacoError::InvalidArgument(msg.into())
    }
}

impl From<image::ImageError> for PacoError {
    fn from(e: image::ImageError) -> Self {
        PacoError::Image(e.to_string())
    }
}
