use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LsiError {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error in {block}: {detail}")]
    Numeric { block: String, detail: String },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing dependency {path}: run `{producer}` first")]
    MissingDependency { path: PathBuf, producer: &'static str },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl LsiError {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        LsiError::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        LsiError::Config(msg.into())
    }
}

pub type Result<T, E = LsiError> = std::result::Result<T, E>;
