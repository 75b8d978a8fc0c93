use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("direction is not unit length (|d| = {0})")]
    NonUnitDirection(f64),

    #[error("subject out of frame")]
    SubjectOutOfFrame,

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("non-finite activations")]
    NonFinite,

    #[error("non-finite loss at step {step} (learning rate {lr})")]
    NonFiniteLoss { step: usize, lr: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("checkpoint stage mismatch: {0}")]
    StageMismatch(String),

    #[error("missing scene metadata for {0}")]
    MissingScene(String),

    #[error("relighting rejected {0} times in a row")]
    TooManyRejections(usize),

    #[error("mask is empty")]
    EmptyMask,

    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn shape(expected: impl std::fmt::Debug, got: impl std::fmt::Debug) -> Self {
        Error::ShapeMismatch { expected: format!("{expected:?}"), got: format!("{got:?}") }
    }
}
