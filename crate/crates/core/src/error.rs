use thiserror::Error;

use crate::decode::HarvestReport;

/// Error type shared by every core module.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("encoding error: {0}")]
    Encoding(String),

    #[error("numeric error in {stage}: {detail}")]
    Numeric { stage: String, detail: String },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid format: {0}")]
    Format(String),

    /// Candidate generation hit the attempt cap before reaching the requested
    /// count. Partial results ride along so callers can still report them.
    #[error(
        "harvest exhausted after {} attempts: {} of {} unique candidates",
        .report.attempts,
        .report.candidates.len(),
        .report.requested
    )]
    HarvestExhausted { report: Box<HarvestReport> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn numeric(stage: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            stage: stage.into(),
            detail: detail.into(),
        }
    }
}
