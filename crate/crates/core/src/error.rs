use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failure reasons for the token and checkpoint binary formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatErrorKind {
    BadMagic,
    UnsupportedVersion,
    BadSourceTag,
    Truncated,
    CrcMismatch,
    NonFinite,
    Malformed,
}

impl FormatErrorKind {
    /// Stable numeric code reported by the CLI.
    pub fn code(self) -> u8 {
        match self {
            Self::BadMagic => 10,
            Self::UnsupportedVersion => 11,
            Self::BadSourceTag => 12,
            Self::Truncated => 13,
            Self::CrcMismatch => 14,
            Self::NonFinite => 15,
            Self::Malformed => 16,
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("non-finite value at index {index} in {what}")]
    NonFinite { what: String, index: usize },

    #[error("{path}: {kind:?} (code {code}): {detail}", code = kind.code())]
    Format {
        path: PathBuf,
        kind: FormatErrorKind,
        detail: String,
    },

    #[error("invalid input: {0}")]
    Invalid(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Self::Invalid(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Self::Config(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, kind: FormatErrorKind, detail: impl Into<String>) -> Self {
        Self::Format {
            path: path.into(),
            kind,
            detail: detail.into(),
        }
    }

    /// Process exit status: 1 for validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::NonFinite { .. } | Self::Numerical(_) => 2,
            _ => 1,
        }
    }
}
