//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} requires a scalar, got shape {shape:?}")]
    NonScalar { op: &'static str, shape: Vec<usize> },
    #[error("empty axis in {op}")]
    EmptyAxis { op: &'static str },
    #[error("degenerate vector with zero norm in {op}")]
    DegenerateVector { op: &'static str },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("index out of range: {0}")]
    Index(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("infeasible budget: {budget} mega-MACs is below the cheapest exit cost {min_cost}")]
    InfeasibleBudget { budget: f64, min_cost: f64 },
    #[error("training diverged at optimizer step {step}: loss = {value}")]
    Divergence { step: usize, value: f64 },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetError>;
