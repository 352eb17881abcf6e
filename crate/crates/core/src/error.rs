use std::fmt;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument `{arg}`: {reason}")]
    InvalidArgument { arg: &'static str, reason: String },

    #[error("backward requested for {0}, which was never produced by a forward pass on this tape")]
    NoForward(String),

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("parse error in <{element}>: {reason}")]
    Parse { element: String, reason: String },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unsupported image format: {0}")]
    Format(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl fmt::Display) -> Self {
        Error::Shape {
            op,
            detail: detail.to_string(),
        }
    }

    pub(crate) fn invalid(arg: &'static str, reason: impl fmt::Display) -> Self {
        Error::InvalidArgument {
            arg,
            reason: reason.to_string(),
        }
    }
}
