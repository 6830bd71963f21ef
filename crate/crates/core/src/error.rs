//! Crate-wide error type and exit-code categories.

use std::path::PathBuf;

use thiserror::Error;

/// Coarse failure category, used by the CLI to pick a process exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    /// Bad flags or config: exit code 1.
    Usage,
    /// Unreadable or invalid input data: exit code 2.
    Data,
    /// Everything else (internal invariant broken, I/O during a run): exit code 3.
    Runtime,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate segment: {0}")]
    DegenerateSegment(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => ErrorCategory::Usage,
            Error::Data(_) | Error::Io { .. } | Error::Json { .. } | Error::Image { .. } => {
                ErrorCategory::Data
            }
            Error::DegenerateSegment(_) | Error::ShapeMismatch { .. } => ErrorCategory::Runtime,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
