use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pretraining and evaluation pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numeric guard: {0}")]
    Numeric(String),

    #[error("stage sequencing error: {0}")]
    Sequencing(String),

    #[error("non-finite loss at stage {stage} step {step}: {detail}")]
    NonFinite { stage: u8, step: usize, detail: String },

    #[error("training error: {0}")]
    Training(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing files for ids: {}", .0.join(", "))]
    MissingFiles(Vec<String>),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Shape(format!($($arg)*))
    };
}
pub(crate) use shape_err;

macro_rules! input_err {
    ($($arg:tt)*) => {
        $crate::error::Error::Input(format!($($arg)*))
    };
}
pub(crate) use input_err;
