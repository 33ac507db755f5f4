use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("refusing to continue: {0}")]
    Refusal(String),

    #[error(transparent)]
    Core(#[from] xmodal_core::Error),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("cannot write {path}: {detail}")]
    Output { path: PathBuf, detail: String },
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn output(path: impl Into<PathBuf>, detail: impl ToString) -> Self {
        CliError::Output {
            path: path.into(),
            detail: detail.to_string(),
        }
    }

    /// 2 usage, 3 refusal, 4 anything that went wrong while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Refusal(_) => 3,
            _ => 4,
        }
    }
}
