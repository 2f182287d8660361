use std::io;

use thiserror::Error;

/// Errors from reading prefix token sequences.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("unknown token `{0}`")]
    UnknownToken(String),
    /// The token at this position cannot fill the leftmost hole.
    #[error("illegal token at position {0}")]
    IllegalToken(usize),
    #[error("formula is incomplete")]
    Incomplete,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: integrity check failed: {message}")]
    Integrity { line: usize, message: String },
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("config: {0}")]
    Config(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
