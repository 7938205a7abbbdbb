//! Error type shared across the crate.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Everything that can go wrong in the pipeline, from WAV parsing to
/// training-time numeric failures.
#[derive(Debug)]
pub enum Error {
    /// Malformed or unsupported audio container.
    Wav(String),
    /// Unsupported sample rate (no resampler in scope).
    SampleRate { got: u32, want: u32 },
    /// Invalid configuration value or cross-field inconsistency.
    Config(String),
    /// Tensor/sequence shape does not match what an operation requires.
    Shape(String),
    /// Checkpoint or tensor-file format violation.
    Format(String),
    /// A tensor in a checkpoint does not match the current configuration.
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    /// Non-finite value where a finite one is required (loss blow-up etc.).
    Numeric(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Wav(msg) => write!(f, "wav: {msg}"),
            Error::SampleRate { got, want } => {
                write!(f, "unsupported sample rate: got {got} Hz, expected {want} Hz")
            }
            Error::Config(msg) => write!(f, "config: {msg}"),
            Error::Shape(msg) => write!(f, "shape: {msg}"),
            Error::Format(msg) => write!(f, "format: {msg}"),
            Error::ShapeMismatch { name, expected, got } => write!(
                f,
                "tensor '{name}' has shape {got:?} but the current config expects {expected:?}"
            ),
            Error::Numeric(msg) => write!(f, "numeric: {msg}"),
            Error::Io(e) => write!(f, "io: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
