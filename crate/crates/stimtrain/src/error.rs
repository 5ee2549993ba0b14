//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid architecture or training configuration; names the offending field.
    #[error("configuration error: {0}")]
    Config(String),

    /// A depth mask does not fit the network spec it is applied to.
    #[error("mask error: {0}")]
    Mask(String),

    /// A sampling rule does not fit the network spec.
    #[error("rule error: {0}")]
    Rule(String),

    /// Enumeration would exceed the configured cap.
    #[error("enumeration error: space cardinality {cardinality} exceeds cap {cap}; sample instead")]
    EnumerationCap { cardinality: u64, cap: u64 },

    /// Non-finite values where finite ones are required.
    #[error("input error: {0}")]
    Input(String),

    /// Tensor shapes do not agree.
    #[error("shape error: {0}")]
    Shape(String),

    /// A class label outside [0, num_classes).
    #[error("label error: label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    /// Backward-pass bookkeeping violated (tape/network mismatch).
    #[error("state error: {0}")]
    State(String),

    /// Malformed dataset or checkpoint bytes; carries the byte offset.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// Training aborted by the divergence guard.
    #[error("divergence: {0}")]
    Divergence(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
