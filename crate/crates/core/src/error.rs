use thiserror::Error;

/// Errors raised by the compression, control and simulation layers.
#[derive(Debug, Error)]
pub enum GravacError {
    #[error("empty gradient vector")]
    EmptyGradient,

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("invalid layer offsets: {0}")]
    InvalidLayout(String),

    #[error("non-finite value: {0}")]
    NonFinite(f64),

    #[error("EWMA read before first observation")]
    Uninitialized,

    #[error("compression factor must be >= 1, got {0}")]
    InvalidCompressionFactor(f64),

    #[error("invalid sparse gradient: {0}")]
    InvalidSparse(String),

    #[error("gradient has zero norm")]
    ZeroNorm,

    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("training diverged at iteration {iteration}: loss {loss} exceeds {limit}")]
    Divergence {
        iteration: u64,
        loss: f64,
        limit: f64,
    },

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("trace error: {0}")]
    Trace(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = GravacError> = std::result::Result<T, E>;

pub(crate) fn invalid(name: &'static str, message: impl Into<String>) -> GravacError {
    GravacError::InvalidParameter {
        name,
        message: message.into(),
    }
}
