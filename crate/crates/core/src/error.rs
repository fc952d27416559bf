use thiserror::Error;

/// Errors produced by the learning pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("infeasible: {0}")]
    Infeasible(String),

    #[error("rejection budget exhausted after {draws} draws ({accepted} accepted, event rate {rate:.3e})")]
    BudgetExhausted { draws: u64, accepted: usize, rate: f64 },

    #[error("candidate count {count} exceeds the configured cap {cap}")]
    CombinatorialBudget { count: u128, cap: usize },

    #[error("ill-conditioned linear system (sigma_min = {0:.3e})")]
    IllConditioned(f64),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
