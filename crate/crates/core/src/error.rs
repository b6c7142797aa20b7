use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {what}: {reason}")]
    Invalid { what: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("crop of {crop}px is below the {min}px minimum for a {size}px input")]
    CropTooSmall { crop: usize, min: usize, size: usize },

    #[error("checkpoint spec mismatch: {0}")]
    SpecMismatch(String),

    #[error("corrupt checkpoint {path}: {reason}")]
    CorruptCheckpoint { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step} ({components})")]
    NonFinite { step: usize, components: String },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("class {0} is absent from the probe training split")]
    MissingClass(usize),

    #[error("zero-variance input: {0}")]
    ZeroVariance(&'static str),

    #[error("unknown dataset `{0}`")]
    UnknownDataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(what: &'static str, reason: impl Into<String>) -> Error {
    Error::Invalid {
        what,
        reason: reason.into(),
    }
}
