use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse failure class, used for CLI exit codes and FFI status codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Validation,
    Runtime,
    Integrity,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedRecord { line: usize, message: String },

    #[error("duplicate document id {0:?}")]
    DuplicateId(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("missing metadata label for document {0:?}")]
    MissingLabel(String),

    #[error("unsupported file version {found:?} (expected {expected:?})")]
    VersionMismatch { found: String, expected: String },

    #[error("corrupt file {path}: {message}")]
    CorruptFile { path: PathBuf, message: String },

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("training diverged at step {step}")]
    Divergence { step: usize },

    #[error("cluster {0} has no training data")]
    EmptyCluster(usize),

    #[error("target {target} outside observed range [{lo}, {hi}]; extrapolation refused")]
    Extrapolation { target: f64, lo: f64, hi: f64 },

    #[error("expert {expert} failed: {message}")]
    JobFailed { expert: usize, message: String },

    #[error("serialization: {0}")]
    Serialization(String),
}

impl Error {
    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::InvalidConfig(_)
            | Error::MalformedRecord { .. }
            | Error::DuplicateId(_)
            | Error::EmptyInput(_)
            | Error::NonFinite(_)
            | Error::MissingLabel(_)
            | Error::EmptyCluster(_)
            | Error::Extrapolation { .. } => ErrorCategory::Validation,
            Error::VersionMismatch { .. } | Error::CorruptFile { .. } | Error::Integrity(_) => {
                ErrorCategory::Integrity
            }
            Error::Io { .. }
            | Error::Divergence { .. }
            | Error::JobFailed { .. }
            | Error::Serialization(_) => ErrorCategory::Runtime,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Serialization(e.to_string())
    }
}
