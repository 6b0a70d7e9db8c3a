use thiserror::Error;

pub type Result<T> = std::result::Result<T, TtaError>;

/// Failure categories surfaced by the engine and the harness.
#[derive(Debug, Error)]
pub enum TtaError {
    /// Invalid hyperparameters, shapes, or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    Dimension { what: &'static str, expected: usize, got: usize },

    /// Caller misuse (empty batch, incompatible reports, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// Adaptation produced a non-finite loss; the run is aborted.
    #[error("non-finite loss at step {step} (adaptation iteration {iteration}): {detail}")]
    NonFinite { step: u64, iteration: usize, detail: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error: {0}")]
    Parse(String),
}

impl TtaError {
    /// Short category tag used for CLI diagnostics and exit codes.
    pub fn category(&self) -> &'static str {
        match self {
            TtaError::Config(_) | TtaError::Dimension { .. } => "config",
            TtaError::Usage(_) => "usage",
            TtaError::NonFinite { .. } => "numeric",
            TtaError::Io(_) => "io",
            TtaError::Parse(_) => "parse",
        }
    }
}

impl From<toml::de::Error> for TtaError {
    fn from(e: toml::de::Error) -> Self {
        TtaError::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for TtaError {
    fn from(e: serde_json::Error) -> Self {
        TtaError::Parse(e.to_string())
    }
}

impl From<csv::Error> for TtaError {
    fn from(e: csv::Error) -> Self {
        TtaError::Parse(e.to_string())
    }
}
