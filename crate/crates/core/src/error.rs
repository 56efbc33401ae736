use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised while decoding a `VGF1` matrix record.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormatError {
    #[error("bad magic: expected `VGF1`, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("truncated: header declares {rows}x{dims} ({expected} bytes of payload), found {found}")]
    Truncated {
        rows: u64,
        dims: u64,
        expected: u64,
        found: u64,
    },
    #[error("truncated header: {0} bytes")]
    TruncatedHeader(usize),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("{0} trailing bytes after matrix payload")]
    TrailingBytes(usize),
    #[error("matrix shape {rows}x{dims} overflows addressable size")]
    Oversized { rows: u64, dims: u64 },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("validation failed ({count} offenders): {}", offenders.join("; "))]
    Validation {
        count: usize,
        /// First ten offending rows, rendered.
        offenders: Vec<String>,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Builds a validation error keeping the first ten offenders.
    pub(crate) fn validation(offenders: Vec<String>) -> Self {
        let count = offenders.len();
        Error::Validation {
            count,
            offenders: offenders.into_iter().take(10).collect(),
        }
    }

    /// Process exit code: 1 usage, 2 validation/check, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Argument(_) | Error::Config(_) => 1,
            Error::Parse { .. } | Error::Validation { .. } | Error::NonFinite(_) => 2,
            Error::Io { .. } | Error::Format { .. } => 3,
        }
    }
}
