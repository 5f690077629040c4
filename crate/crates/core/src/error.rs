use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("infeasible marginals: row mass {row_mass} != column mass {col_mass}")]
    InfeasibleMarginals { row_mass: f64, col_mass: f64 },

    #[error("infeasible constraints: {0}")]
    InfeasibleConstraints(String),

    #[error("kernel {axis} {index} has no finite entry")]
    ZeroLine { axis: &'static str, index: usize },

    #[error("{what} did not converge after {iterations} iterations (residual {residual:e})")]
    NonConvergence {
        what: &'static str,
        iterations: usize,
        residual: f64,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("{what} of size {size} exceeds the limit {limit}")]
    TooLarge {
        what: &'static str,
        size: usize,
        limit: usize,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
