//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, AteError>;

#[derive(Debug, Error)]
pub enum AteError {
    /// Tensor/graph shape mismatch; names the offending operation.
    #[error("dimension error in `{op}`: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// API misuse (e.g. backward on an already-consumed tape).
    #[error("usage error: {0}")]
    Usage(String),

    /// Inputs outside a function's numeric domain (non-positive variance etc.).
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    /// Synthetic data generation could not satisfy its postcondition.
    #[error("generation error: {0}")]
    Generation(String),

    /// A file is not in the expected format (bad magic, malformed header).
    #[error("format error: {0}")]
    Format(String),

    /// A file has the right format but its payload is truncated or inconsistent.
    #[error("corruption error: {0}")]
    Corruption(String),

    /// File version newer than this reader understands.
    #[error("unsupported version {found} (this reader supports version {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },

    /// A pipeline stage ran before its prerequisites.
    #[error("pipeline order error: {0}")]
    PipelineOrder(String),

    /// Bad configuration key or value.
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl AteError {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        AteError::Dimension { op, detail: detail.into() }
    }
}
