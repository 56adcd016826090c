use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("shape error: {0}")]
    Shape(String),

    /// Bad caller input (unknown names, invalid counts, bad config values).
    #[error("usage error: {0}")]
    Usage(String),

    /// An operation precondition was violated.
    #[error("contract error: {0}")]
    Contract(String),

    /// A structural invariant of a domain type would be broken.
    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("parse error at byte {offset}: {message}")]
    Parse { offset: usize, message: String },

    #[error("parse error at line {line}: {message}")]
    Line { line: usize, message: String },

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    Version { found: String, expected: u32 },

    /// Training diverged.
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn invariant(msg: impl Into<String>) -> Self {
        Error::Invariant(msg.into())
    }
}
