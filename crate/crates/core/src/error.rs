use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the reader pipeline.
///
/// Variants are grouped by the exit-code class the command-line surface
/// reports for them (see [`Error::class`]).
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("index {index} out of range for {what} of size {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("softmax has empty support: every position is masked")]
    EmptySupport,

    #[error("usage error: {0}")]
    Usage(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("validation error at line {line}: {message}")]
    Validation { line: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("corrupt checkpoint: {0}")]
    Corruption(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Coarse error classes, used for process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Validation,
    Numeric,
    Io,
    Config,
    Internal,
}

impl ErrorClass {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorClass::Usage => "usage",
            ErrorClass::Validation => "validation",
            ErrorClass::Numeric => "numeric",
            ErrorClass::Io => "io",
            ErrorClass::Config => "config",
            ErrorClass::Internal => "internal",
        }
    }

    pub fn exit_code(self) -> i32 {
        match self {
            ErrorClass::Internal => 1,
            ErrorClass::Usage => 2,
            ErrorClass::Validation => 3,
            ErrorClass::Numeric => 4,
            ErrorClass::Io => 5,
            ErrorClass::Config => 6,
        }
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Usage(_) => ErrorClass::Usage,
            Error::Validation { .. } | Error::Parse { .. } | Error::Corruption(_) => {
                ErrorClass::Validation
            }
            Error::Numeric(_) | Error::EmptySupport => ErrorClass::Numeric,
            Error::Io { .. } => ErrorClass::Io,
            Error::Config(_) => ErrorClass::Config,
            Error::Dimension { .. } | Error::Index { .. } => ErrorClass::Internal,
        }
    }
}
