use std::path::PathBuf;

use thiserror::Error;

use crate::wireframe::WireframeError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("cannot access {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Wireframe(#[from] WireframeError),

    #[error("image decode/encode failed: {0}")]
    Image(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("unmatched ids: {}", .0.join(", "))]
    Orphans(Vec<String>),

    #[error("checkpoint incompatible at `{key}`: checkpoint has {found}, current config has {expected}")]
    CheckpointMismatch {
        key: String,
        found: String,
        expected: String,
    },

    #[error("non-finite loss at step {step}: {terms}")]
    NonFinite { step: u64, terms: String },

    #[error("metric error: {0}")]
    Metric(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
