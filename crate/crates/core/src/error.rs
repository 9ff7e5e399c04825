use std::path::PathBuf;

use autodiff::AdError;

/// Broad failure class, used by the command line to pick an exit code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    /// Bad configuration or arguments.
    Usage,
    /// Missing, malformed or inconsistent input data.
    Data,
    /// Non-finite values or other numerical breakdown.
    Numeric,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{file}, row {row}: {message}")]
    Row { file: String, row: u64, message: String },

    #[error("{0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numeric(String),

    #[error("{}: invalid JSON: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error(transparent)]
    Autodiff(#[from] AdError),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) => ErrorKind::Usage,
            Error::Io { .. } | Error::Row { .. } | Error::Data(_) | Error::Json { .. } => ErrorKind::Data,
            Error::Numeric(_) | Error::Autodiff(_) => ErrorKind::Numeric,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn row(file: &str, row: u64, message: impl Into<String>) -> Self {
        Error::Row { file: file.to_string(), row, message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
