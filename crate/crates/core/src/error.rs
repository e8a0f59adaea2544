use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index out of range: {0}")]
    Index(String),

    #[error("degenerate plane: instance normalization needs at least 2 elements per plane, got {0}")]
    DegeneratePlane(usize),

    #[error("stale cache: parameters changed since the forward pass ({cached} != {current})")]
    StaleCache { cached: u64, current: u64 },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
