use thiserror::Error;

/// Errors produced by the defense library.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid input: {0}")]
    InvalidInput(String),
    /// A text file did not match its expected format. `line` is 1-based; 0
    /// means the problem is not tied to a single line.
    #[error("parse error (line {line}): {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("image codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}

pub(crate) fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}
