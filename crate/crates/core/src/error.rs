use std::path::PathBuf;

/// Errors produced by the segmentation core.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {actual:?}")]
    Shape {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("mask is empty")]
    EmptyMask,

    #[error("coordinate out of range: {0}")]
    OutOfRange(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    /// The request is well formed but not valid in the current state.
    #[error("{0}")]
    InvalidState(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("checksum mismatch in {0}")]
    Checksum(PathBuf),

    #[error("non-finite value in {0}")]
    Numeric(String),

    #[error("not found: {0}")]
    NotFound(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("detector error: {0}")]
    Detector(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(expected: (usize, usize), actual: (usize, usize)) -> Self {
        Error::Shape { expected, actual }
    }
}
