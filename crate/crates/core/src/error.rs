use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the captioning pipeline.
#[derive(Debug, Error)]
pub enum GebcError {
    #[error("parse error in {context}: {message}")]
    Parse { context: String, message: String },

    #[error("video {video_id}: {rule}")]
    Invariant { video_id: String, rule: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    #[error("unmatched predictions: {0}")]
    Unmatched(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("corrupt file {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

impl GebcError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        GebcError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        GebcError::InvalidInput(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        GebcError::Shape(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, GebcError>;
