//! Error type shared across the crate.

use std::fmt;
use std::io;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensor ops, model construction, data handling, and training.
#[derive(Debug)]
pub enum Error {
    /// An operation received tensors of incompatible shapes.
    Shape(String),
    /// A model or run configuration violates its invariants.
    Config(String),
    /// A runtime input (sample, label, argument) is invalid.
    Input(String),
    /// An API contract was violated (non-scalar loss, mismatched state, ...).
    Contract(String),
    /// A text file failed to parse; `row` is 1-based and includes the header.
    Parse {
        path: String,
        row: usize,
        message: String,
    },
    /// A file does not match its declared format (bad magic, missing column, ...).
    Format(String),
    /// An image file could not be decoded.
    Decode { path: String, message: String },
    /// A record failed its CRC check; `record` is the 0-based record index.
    Corrupt { record: usize },
    /// A checkpoint does not match the model it is being loaded into.
    Checkpoint(String),
    /// Training produced a non-finite loss.
    NonFinite {
        head: &'static str,
        batch: usize,
        epoch: usize,
    },
    /// Underlying I/O failure.
    Io(io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Input(msg) => write!(f, "input error: {msg}"),
            Error::Contract(msg) => write!(f, "contract violation: {msg}"),
            Error::Parse { path, row, message } => {
                write!(f, "parse error in {path} at row {row}: {message}")
            }
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Decode { path, message } => write!(f, "cannot decode {path}: {message}"),
            Error::Corrupt { record } => {
                write!(f, "corrupt record {record}: CRC mismatch")
            }
            Error::Checkpoint(msg) => write!(f, "checkpoint error: {msg}"),
            Error::NonFinite { head, batch, epoch } => write!(
                f,
                "non-finite loss on head `{head}` in batch {batch} of epoch {epoch}"
            ),
            Error::Io(err) => write!(f, "io error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<io::Error> for Error {
    fn from(err: io::Error) -> Self {
        Error::Io(err)
    }
}
