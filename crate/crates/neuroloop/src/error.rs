use thiserror::Error;

/// Crate-wide error type. `Config` and `Parameter` indicate bad inputs that
/// should be fixed by the caller; the rest are runtime failures.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("rank variance is degenerate; rerun in permutation mode")]
    DegenerateVariance,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by an invalid configuration or parameter set,
    /// as opposed to runtime/IO failures.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Parameter(_))
    }
}
