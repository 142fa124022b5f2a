use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty region")]
    EmptyRegion,

    #[error("empty reference region")]
    EmptyReferenceRegion,

    #[error("reference too small: {pixels} pixels after resize (need at least {required})")]
    ReferenceTooSmall { pixels: usize, required: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unusable image: {0}")]
    UnusableImage(String),

    #[error("weight archive error in parameter `{param}`: {reason}")]
    ArchiveParam { param: String, reason: String },

    #[error("weight archive error: {0}")]
    Archive(String),

    #[error("model config mismatch: archive has {archive}, expected {expected}")]
    ConfigMismatch { archive: String, expected: String },

    #[error("non-finite loss at step {step} (batch ids: {batch_ids:?})")]
    NonFiniteLoss { step: u64, batch_ids: Vec<String> },

    #[error("missing dataset: {0}")]
    MissingDataset(PathBuf),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
