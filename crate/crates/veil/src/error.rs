//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of two inputs do not line up (image sizes, vector dims).
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A parameter is outside its valid range.
    #[error("invalid parameter: {0}")]
    Param(String),

    /// A dataset violates a structural precondition (empty class, too few
    /// classes, ...).
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A model is missing something the operation needs (head, training).
    #[error("model error: {0}")]
    Model(String),

    /// A computation produced non-finite values or lost rank.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// File I/O failed; carries the offending path.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A run configuration is inconsistent or names an unknown scenario.
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config/usage, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Param(_) | Error::Model(_) | Error::Config(_) => 2,
            Error::Dimension(_) | Error::Dataset(_) | Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
