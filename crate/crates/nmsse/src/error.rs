use thiserror::Error;

/// Errors surfaced by kernel construction, field sampling and propagation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("kernel evaluation is not finite at channels ({i},{j}), times ({tau},{s})")]
    NonFiniteKernelValue { i: usize, j: usize, tau: f64, s: f64 },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("matrix is not Hermitian (relative residual {residual:.3e})")]
    NotHermitian { residual: f64 },

    #[error("kernel is not symmetric (relative residual {residual:.3e})")]
    KernelNotSymmetric { residual: f64 },

    #[error("J policy not applicable: {0}")]
    PolicyInapplicable(String),

    #[error("covariance is not positive semi-definite (min eigenvalue {min_eig:.3e})")]
    NotPositive { min_eig: f64 },

    #[error("state component exceeded the overflow guard at node {node}; reduce t_max or the field amplitude")]
    SchemeOverflow { node: usize },

    #[error("cannot normalize a state with vanishing norm")]
    ZeroNormState,

    #[error("invalid time grid: {0}")]
    InvalidGrid(String),

    #[error("invalid system specification: {0}")]
    InvalidSystem(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T> = std::result::Result<T, Error>;
