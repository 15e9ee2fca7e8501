use std::path::PathBuf;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: non-finite value in output")]
    NonFinite { op: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("dataset file not found: {path} (expected {expected})")]
    MissingData { path: PathBuf, expected: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("missing gradient for trainable parameter `{0}`")]
    MissingGradient(String),

    #[error("non-differentiable configuration: {0}")]
    NonDifferentiable(String),

    #[error("warm-up failed to reach the skip-ratio tolerance: final ratio {ratio:.4} after {iterations} iterations")]
    WarmupFailed { ratio: f64, iterations: usize },

    #[error("training diverged at iteration {iteration} in phase {phase}")]
    Divergence { phase: String, iteration: usize },

    #[error("budget {limit} is infeasible; the first exit needs at least {min_budget}")]
    BudgetInfeasible { limit: f64, min_budget: f64 },

    #[error("cost model: {0}")]
    CostModel(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }
}
