use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Operand extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An API was called outside its contract (e.g. backward on a non-scalar).
    #[error("contract error: {0}")]
    Contract(String),
    /// Input values violate a documented precondition.
    #[error("validation error: {0}")]
    Validation(String),
    #[error("config error: {0}")]
    Config(String),
    /// Binary input could not be decoded.
    #[error("parse error at byte offset {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    /// A decoded record carries an out-of-range value.
    #[error("value error at record {index}: {msg}")]
    Value { index: usize, msg: String },
    #[error("degenerate data: {0}")]
    Degenerate(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
