use thiserror::Error;

/// Errors produced by the numerical engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("operator is not Hermitian (deviation {deviation:.3e})")]
    NotHermitian { deviation: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("channel evaluation failed at omega={omega}, t={t}: {message}")]
    Evaluation { omega: f64, t: f64, message: String },

    #[error("constrained problem infeasible at t={t} (residual {residual:.3e})")]
    Infeasible { t: f64, residual: f64 },

    #[error("semidefinite solver failed at t={t}: {message}")]
    Solver { t: f64, message: String },

    #[error("state check failed at t={t}: {message}")]
    StateCheck { t: f64, message: String },

    #[error("error-correction condition violated: {0}")]
    Correction(String),

    #[error("{0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;
