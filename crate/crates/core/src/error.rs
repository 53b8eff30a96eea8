use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("length mismatch: expected {expected} items, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("class `{class_id}` has no usable generated images left after calibration; regenerate its flagged images")]
    EmptyPrototype { class_id: String },
    #[error("failed to decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("model artifact error: {0}")]
    Artifact(String),
    #[error("inference failed: {0}")]
    Inference(String),
    #[error("scale {scale} of image `{image_id}`: {source}")]
    AtScale {
        image_id: String,
        scale: usize,
        #[source]
        source: Box<CoreError>,
    },
    #[error("feature cache: {0}")]
    Cache(String),
    #[error("unknown encoder backend `{0}`")]
    UnknownBackend(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CoreError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        CoreError::Domain(msg.into())
    }
}
