//! Crate-wide error type and result alias.

use crate::types::Domain;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Config file failed to parse.
    #[error("config parse error: {0}")]
    ConfigParse(String),

    /// Config parsed but violates an invariant; names the offending key.
    #[error("invalid config: key `{key}`: {msg}")]
    ConfigInvalid { key: String, msg: String },

    /// Tensor shape violates an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// A batch was fed to a path expecting the other domain.
    #[error("domain mismatch: expected {expected}, got {got}")]
    DomainMismatch { expected: Domain, got: Domain },

    /// A loss term became NaN/Inf; signals training divergence.
    #[error("non-finite value in `{term}`")]
    NonFinite { term: String },

    /// Dataset scanning or decoding problem.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// Checkpoint file malformed, truncated, or of an unknown version.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// Embedding / metric operand dimensions disagree.
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    /// Metric computation failed (bad labels, non-convergent decomposition).
    #[error("metric error: {0}")]
    Metric(String),

    /// An uncertainty map violated positivity.
    #[error("non-positive sigma: {0}")]
    NonPositiveSigma(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn invalid(key: impl Into<String>, msg: impl Into<String>) -> Self {
        Error::ConfigInvalid {
            key: key.into(),
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
