//! Error type shared by every pipeline stage.

use thiserror::Error;

/// Crate-wide error enum. Variants map one-to-one onto the failure
/// categories of the public operations (decode, shape, bounds, ...).
#[derive(Debug, Error)]
pub enum Error {
    #[error("decode error: {0}")]
    Decode(String),

    #[error("channel error: {0}")]
    Channel(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("bounds error: {0}")]
    Bounds(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("prior load error: {0}")]
    PriorLoad(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("persistence error: {0}")]
    Persistence(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Persistence(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
