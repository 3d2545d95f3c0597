use std::io;

/// Errors produced by the library. The variants map one-to-one onto the
/// CLI exit-code classes.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("undefined: {0}")]
    Undefined(String),
    #[error("numeric divergence: {0}")]
    Diverged(String),
    #[error("artifact mismatch: {0}")]
    Mismatch(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Dimension(msg.into()))
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Config(msg.into()))
}
