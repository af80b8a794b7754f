//! Error types shared across the toolkit.

use thiserror::Error;

/// Errors produced by the homogenization toolkit.
#[derive(Debug, Error)]
pub enum PerihomError {
    /// An argument violated a precondition (dimensions, signs, grid compatibility).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two fields or kernels live on incompatible grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// A model or kernel failed validation (degenerate kernel, violated bounds).
    #[error("validation failed: {0}")]
    Validation(String),

    /// A quadrature or periodization did not reach the requested accuracy.
    #[error("accuracy failure: {0}")]
    Accuracy(String),

    /// An iterative solver exhausted its iteration budget.
    #[error("solver did not converge: {0}")]
    Convergence(String),

    /// A Fredholm solvability condition was violated before a singular solve.
    #[error("solvability condition violated: {0}")]
    Solvability(String),

    /// Serialization or file-format problem.
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Convenient result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, PerihomError>;
