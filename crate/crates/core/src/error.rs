use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("unsupported {what}: {value}")]
    Unsupported { what: &'static str, value: String },

    #[error("format error in {context}: {reason}")]
    Format { context: String, reason: String },

    #[error("length mismatch for {what}: expected {expected}, got {actual}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("timestamps are not {0}")]
    Timestamps(&'static str),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("input too short: {0}")]
    TooShort(String),

    #[error("non-finite sample in {0}")]
    NonFinite(&'static str),

    #[error("time ranges do not overlap")]
    DisjointTime,

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn format(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Format {
            context: context.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// Stable machine-readable identifier for the error class.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter { .. } => "invalid_parameter",
            Error::Unsupported { .. } => "unsupported",
            Error::Format { .. } => "format",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::Timestamps(_) => "timestamps",
            Error::Empty(_) => "empty",
            Error::TooShort(_) => "too_short",
            Error::NonFinite(_) => "non_finite",
            Error::DisjointTime => "disjoint_time",
            Error::Config(_) => "config",
            Error::File { .. } | Error::Io(_) => "io",
        }
    }
}
