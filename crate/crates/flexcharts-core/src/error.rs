use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Tensor dimension mismatch; the message names the offending axes.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// A forward or backward pass produced NaN or Inf.
    #[error("{op}: non-finite value encountered{}", detail.as_deref().map(|d| format!(" ({d})")).unwrap_or_default())]
    NonFinite {
        op: &'static str,
        detail: Option<String>,
    },

    #[error("{0}")]
    InvalidArg(String),

    #[error("config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    /// The configured wall-clock budget ran out; partial state was persisted.
    #[error("wall-clock budget exhausted at epoch {epoch}")]
    BudgetExhausted { epoch: u32 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn non_finite(op: &'static str) -> Self {
        Error::NonFinite { op, detail: None }
    }
}
