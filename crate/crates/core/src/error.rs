use std::io;

use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("size mismatch: {0}")]
    Size(String),

    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },

    #[error("phase {0} has already been acquired")]
    DoubleAcquisition(usize),

    #[error("episode already finished after {0} selections")]
    EpisodeFinished(usize),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("reference image has zero energy")]
    DegenerateReference,

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite loss at episode {episode}, gradient step {step}: {detail}")]
    NonFinite {
        episode: usize,
        step: usize,
        detail: String,
    },

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn size_err(msg: impl Into<String>) -> Error {
    Error::Size(msg.into())
}
