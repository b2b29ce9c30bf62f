//! Error taxonomy shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shape or extent mismatch between operands.
    #[error("dimension error: {0}")]
    Dim(String),

    /// A non-finite value was produced or supplied where finiteness is required.
    #[error("numeric error: non-finite value in {0}")]
    NonFinite(String),

    /// The inter-correlation branch was handed a reference bank with no entries.
    #[error("empty reference bank")]
    EmptyBank,

    /// Configuration file or knob violation.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed tensor file; `offset` is the byte position of the defect.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    /// A metric that needs both classes was given only one.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// Command-line misuse outside of what the argument parser catches.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }
}
