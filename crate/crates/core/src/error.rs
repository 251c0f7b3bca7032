//! Error taxonomy shared across the crate.
//!
//! The CLI maps these onto exit codes: usage/input problems exit 1,
//! numeric divergence exits 2.

use std::fmt;
use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug)]
pub enum Error {
    /// A configuration value is out of its documented range. Names the field.
    Config { field: String, message: String },
    /// An operation was called with arguments violating its preconditions.
    Argument(String),
    /// Feature file does not start with the `CDLF` magic.
    MagicMismatch { path: PathBuf, found: [u8; 4] },
    /// Feature file byte length disagrees with its declared count * dim.
    Truncated {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },
    /// A caption record points at a feature row that does not exist.
    FeatureRowOutOfRange { key: String, row: u32, count: u32 },
    /// Malformed JSONL / vocab / manifest content.
    Parse { path: PathBuf, message: String },
    Io { path: PathBuf, source: io::Error },
    /// Non-finite values showed up where finite numbers are required.
    Divergence(String),
}

impl Error {
    pub fn config(field: &str, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub fn argument(message: impl Into<String>) -> Self {
        Error::Argument(message.into())
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence(_))
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Config { field, message } => write!(f, "config error in `{field}`: {message}"),
            Error::Argument(m) => write!(f, "invalid argument: {m}"),
            Error::MagicMismatch { path, found } => write!(
                f,
                "{}: bad magic {:?}, expected \"CDLF\"",
                path.display(),
                found
            ),
            Error::Truncated {
                path,
                expected,
                actual,
            } => write!(
                f,
                "{}: file is {actual} bytes but header declares {expected}",
                path.display()
            ),
            Error::FeatureRowOutOfRange { key, row, count } => write!(
                f,
                "record `{key}` references feature row {row} but the file has {count} rows"
            ),
            Error::Parse { path, message } => write!(f, "{}: {message}", path.display()),
            Error::Io { path, source } => write!(f, "{}: {source}", path.display()),
            Error::Divergence(m) => write!(f, "numeric divergence: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}
