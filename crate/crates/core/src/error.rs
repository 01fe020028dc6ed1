use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ImgError>;

#[derive(Debug, Error)]
pub enum ImgError {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

impl ImgError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ImgError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by user-supplied data or configuration.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            ImgError::Config(_)
                | ImgError::InvalidInput(_)
                | ImgError::Format { .. }
                | ImgError::Validation(_)
                | ImgError::Parse { .. }
                | ImgError::Json(_)
        )
    }
}
