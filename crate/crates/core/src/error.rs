use std::io;

use thiserror::Error;

/// Errors raised across the framework.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error in {field}: {reason}")]
    Format { field: &'static str, reason: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("storage error: {0}")]
    Storage(String),

    #[error("message too large: {0} bytes")]
    MessageTooLarge(usize),

    #[error("unknown topic {0:?}")]
    UnknownTopic(String),

    #[error("malformed message body: {0}")]
    Parse(String),

    #[error("credential rejected: {0}")]
    CredentialRejected(String),

    #[error("transport error: {0}")]
    Transport(#[from] io::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("request refused: {0}")]
    Refused(String),

    #[error("round aborted: {0}")]
    RoundAborted(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
