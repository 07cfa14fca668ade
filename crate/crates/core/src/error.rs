use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Coarse classification used by front-ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Config,
    Data,
    Numerical,
    Internal,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },

    #[error("{op}: {detail}")]
    Geometry { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing CIFAR-10 file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("{}: size {size} bytes is not a positive multiple of the 3073-byte record", path.display())]
    WrongFileSize { path: PathBuf, size: u64 },

    #[error("{}: record {record} has label byte {label} (expected < 10)", path.display())]
    BadLabel {
        path: PathBuf,
        record: usize,
        label: u8,
    },

    #[error("dataset error: {0}")]
    Data(String),

    #[error("checkpoint: bad magic header")]
    BadMagic,

    #[error("checkpoint: format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint: truncated while reading {what} (need {needed} bytes, {available} left)")]
    Truncated {
        what: &'static str,
        needed: usize,
        available: usize,
    },

    #[error("checkpoint: corrupt contents: {0}")]
    Corrupt(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Config(_) => ErrorClass::Config,
            Error::Numerical(_) => ErrorClass::Numerical,
            Error::MissingFile(_)
            | Error::WrongFileSize { .. }
            | Error::BadLabel { .. }
            | Error::Data(_)
            | Error::BadMagic
            | Error::VersionMismatch { .. }
            | Error::Truncated { .. }
            | Error::Corrupt(_)
            | Error::Io(_)
            | Error::Json(_) => ErrorClass::Data,
            Error::ShapeMismatch { .. } | Error::Geometry { .. } | Error::InvalidArgument(_) => {
                ErrorClass::Internal
            }
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
