use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("contract violation in {op}: {detail}")]
    Contract { op: &'static str, detail: String },

    #[error("non-finite value produced by {op} at tape node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("oracle refused input: {0}")]
    OracleRefused(String),

    #[error("invalid config at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("unsupported format: {0}")]
    UnsupportedFormat(String),

    #[error("unsupported format version {found} (this build reads version {expected})")]
    UnsupportedVersion { found: u32, expected: u32 },

    #[error("corrupt file at byte offset {offset}: {detail}")]
    Corrupt { offset: u64, detail: String },
}

/// Coarse failure class, used by the command-line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCategory {
    Config,
    Data,
    Numeric,
    Io,
    Internal,
}

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    pub fn contract(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Contract {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn category(&self) -> ErrorCategory {
        match self {
            Error::Config { .. } => ErrorCategory::Config,
            Error::Data(_)
            | Error::UnsupportedFormat(_)
            | Error::UnsupportedVersion { .. }
            | Error::Corrupt { .. } => ErrorCategory::Data,
            Error::NonFinite { .. } | Error::Numeric(_) => ErrorCategory::Numeric,
            Error::Io { .. } => ErrorCategory::Io,
            Error::Dimension { .. } | Error::Contract { .. } | Error::OracleRefused(_) => {
                ErrorCategory::Internal
            }
        }
    }
}
