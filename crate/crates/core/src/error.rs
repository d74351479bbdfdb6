//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor shapes incompatible for the attempted operation.
    #[error("dimension mismatch in {context}: {left:?} vs {right:?}")]
    Dimension {
        context: String,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// An API contract was violated (non-scalar backward output, state drift, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A detection produced an empty point segment; the caller must remove
    /// or substitute such detections before pooling.
    #[error("degenerate detection: {0}")]
    DegenerateDetection(String),

    /// Text input could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A required key was missing from a structured input.
    #[error("missing key: {0}")]
    MissingKey(String),

    /// Binary input had an invalid layout.
    #[error("format error: {0}")]
    Format(String),

    /// Invalid configuration.
    #[error("config error: {0}")]
    Config(String),

    /// Inconsistent or unusable data supplied at runtime.
    #[error("data error: {0}")]
    Data(String),

    /// No sensor modality available for a frame.
    #[error("sensor failure: no modality available")]
    SensorFailure,

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(context: impl Into<String>, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            context: context.into(),
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
