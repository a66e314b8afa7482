use thiserror::Error;

/// Error variants shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A precondition on an argument was violated.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Matrix/vector dimensions do not agree.
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    /// An iterative eigensolver failed to reach its residual target.
    #[error("eigensolver did not converge: residual {residual}")]
    EigenNotConverged { residual: f64 },

    /// A non-finite value surfaced where one must not (training abort).
    #[error("numerical abort: {0}")]
    Numerical(String),

    /// Configuration file or flag error.
    #[error("config error: {0}")]
    Config(String),

    /// Malformed on-disk data.
    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub(crate) fn shape_mismatch(expected: impl Into<String>, got: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        expected: expected.into(),
        got: got.into(),
    }
}
