use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error: {0}")]
    Wav(#[from] hound::Error),

    #[error("unsupported wav encoding: {0}")]
    UnsupportedCodec(String),

    #[error("sample rate {found} Hz is not supported (expected {expected} Hz, no resampling is performed)")]
    SampleRate { found: u32, expected: u32 },

    #[error("empty signal")]
    Empty,

    #[error("signal contains a non-finite sample at index {index}")]
    NonFiniteSample { index: usize },

    #[error("signal too short: {len} samples, need at least {required}")]
    TooShort { len: usize, required: usize },

    #[error("length mismatch: {left} vs {right} samples")]
    LengthMismatch { left: usize, right: usize },

    #[error("{what} has zero energy")]
    ZeroEnergy { what: &'static str },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in stage `{stage}`")]
    NonFinite { stage: &'static str },

    #[error("invalid table data: {0}")]
    Tables(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

/// Fails with [`Error::NonFinite`] tagged with `stage` if any value is NaN or infinite.
pub(crate) fn ensure_finite(stage: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { stage })
    }
}
