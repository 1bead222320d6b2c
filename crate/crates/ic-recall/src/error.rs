use thiserror::Error;

#[derive(Debug, Error)]
pub enum IcError {
    #[error("invalid arguments: {0}")]
    InvalidArgs(String),
    #[error("relation capacity exceeded for n={n}, m={m}: {reason}")]
    CapacityExceeded { n: usize, m: usize, reason: String },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("sequence length {len} exceeds maximum {max}")]
    LengthExceeded { len: usize, max: usize },
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed file {path}: {reason}")]
    Malformed { path: String, reason: String },
}

pub type Result<T> = std::result::Result<T, IcError>;
