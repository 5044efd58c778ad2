//! Error type shared across the crate.

use ndarray::Array2;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, ExtremileError>;

/// Failure modes of estimation and simulation routines.
///
/// `NonConvergence` carries the best iterate found so callers can inspect or
/// reuse it; everything else is a plain description of what was violated.
#[derive(Debug, thiserror::Error)]
pub enum ExtremileError {
    /// An argument is outside its mathematical domain (tau, t, kappa, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// Array shapes or schemas do not line up.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// An input or intermediate value is NaN or infinite.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// A matrix that must be inverted is singular or not positive definite.
    #[error("singular system: {0}")]
    Singular(String),

    /// An input collection is empty where at least one element is required.
    #[error("empty input: {0}")]
    Empty(String),

    /// The optimizer exhausted `max_iter`; `best_alpha` is the best iterate.
    #[error("no convergence after {iterations} iterations (gradient inf-norm {grad_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        best_alpha: Box<Array2<f64>>,
    },
}
