//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Input data violates a structural precondition (wrong lengths, empty
    /// sets, resolution mismatches, values out of range).
    #[error("malformed input: {0}")]
    MalformedInput(String),

    /// Tensor operands have incompatible shapes.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A reduction row has no unmasked entries.
    #[error("all entries masked in reduction: {0}")]
    AllMasked(String),

    /// A serialized artifact has a bad magic, version, or truncated payload.
    #[error("format error: {0}")]
    Format(String),

    /// Scene generation could not satisfy the configured constraints.
    #[error("generation error: {0}")]
    Generation(String),

    /// A segmenter request sequence violates the prompting protocol.
    #[error("protocol error: {0}")]
    Protocol(String),

    /// A numeric value became NaN or infinite where finiteness is required.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Bad configuration file or unknown key.
    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
