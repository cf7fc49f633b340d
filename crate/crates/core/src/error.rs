use thiserror::Error;

/// Errors reported by the solvers.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("negative weight {weight} at atom {index}")]
    NegativeWeight { index: usize, weight: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("unbalanced marginals: {left} vs {right}")]
    Unbalanced { left: f64, right: f64 },
    #[error("infeasible: {0}")]
    Infeasible(String),
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("ties are not allowed: {0}")]
    Ties(String),
    #[error("not cyclically monotone, violating cycle {0:?}")]
    NotMonotone(Vec<usize>),
}

pub type Result<T> = std::result::Result<T, Error>;
