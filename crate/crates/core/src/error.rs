use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the keyword-spotting pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {cause}")]
    Io { path: PathBuf, cause: std::io::Error },

    #[error("wav error: {0}")]
    Wav(hound::Error),

    #[error("unsupported sample rate {0} Hz (expected 16000)")]
    UnsupportedSampleRate(u32),

    #[error("expected mono audio, got {0} channels")]
    NotMono(u16),

    #[error("unsupported wav sample format: {0}")]
    UnsupportedFormat(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(csv::Error),
}

impl From<hound::Error> for Error {
    fn from(e: hound::Error) -> Self {
        Error::Wav(e)
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e)
    }
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
