//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
    #[error("action out of range: component {index} = {value}, expected within [-1, 1]")]
    ActionOutOfRange { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("oracle enumeration too large: {entries} joint entries exceed the {limit} limit")]
    OracleTooLarge { entries: u128, limit: u128 },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI maps this error to.
    ///
    /// Config and spec problems exit with 2, numeric failures (NaN or
    /// divergence during training) with 3, everything else with 1.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidSpec(_) | Error::Config(_) | Error::InvalidArgument(_) => 2,
            Error::NonFinite(_) => 3,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
