//! Error type shared across the crate.
//!
//! Variants are grouped by failure class rather than by module so that
//! callers (notably the CLI) can map them onto stable exit codes.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Incompatible dimensions (matrix shapes, vector lengths, row counts).
    Shape(String),
    /// Input outside an operation's domain (empty vector, non-positive
    /// temperature, invalid token id, malformed record).
    Domain(String),
    /// A computation produced or encountered a non-finite value.
    Numeric(String),
    /// A keyed record was not found.
    Lookup(String),
    /// Invalid configuration (unknown parameter name, bad weights).
    Config(String),
    /// Filesystem failure.
    Io(String),
    /// A persisted file failed to parse.
    Parse { line: usize, message: String },
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Lookup(msg) => write!(f, "lookup error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Io(msg) => write!(f, "i/o error: {msg}"),
            Error::Parse { line, message } => write!(f, "parse error at line {line}: {message}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
