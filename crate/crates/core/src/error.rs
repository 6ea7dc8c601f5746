//! Error type shared across the toolkit.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A domain invariant was violated (bad value range, empty set, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Two arrays that must agree in shape do not.
    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    /// The backend cannot satisfy the request (e.g. no gradient access).
    #[error("capability error: {0}")]
    Capability(String),

    /// Toy-model training finished without reaching the quality gate.
    #[error("training failed: held-out mIoU {miou:.4} below required {required:.4}")]
    TrainingFailed { miou: f64, required: f64 },

    /// A stored file does not match the documented schema.
    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("image codec error: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::ShapeMismatch {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
