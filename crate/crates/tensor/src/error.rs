use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    /// Extents of one or more operands do not line up.
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    /// Valid shapes, but a parameter combination the op cannot honour
    /// (non-integer output extent, indivisible pooling window, ...).
    #[error("invalid configuration for {op}: {detail}")]
    Config { op: &'static str, detail: String },

    /// API misuse such as calling backward on a non-scalar.
    #[error("usage error: {0}")]
    Usage(String),

    #[error("masked loss has no valid pixels")]
    EmptyMask,
}

pub type Result<T> = std::result::Result<T, TensorError>;

pub(crate) fn dim_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Dimension {
        op,
        detail: detail.into(),
    })
}

pub(crate) fn config_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(TensorError::Config {
        op,
        detail: detail.into(),
    })
}
