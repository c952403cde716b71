//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model validation, simulation, and the solvers.
#[derive(Debug, Error)]
pub enum CoreError {
    /// Invalid configuration or parameters rejected at construction time.
    #[error("configuration error: {0}")]
    Config(String),

    /// Evaluation outside the mathematical domain (e.g. a singular driver
    /// probed at `y <= 0`, or a nonpositive terminal sample).
    #[error("domain error: {0}")]
    Domain(String),

    /// Numerical failure inside a solver step (non-contracting inner loop,
    /// rank-deficient regression, non-finite intermediate values).
    #[error("numerical error: {0}")]
    Numerics(String),

    /// Degenerate market coefficients (singular or near-singular `sigma sigma'`).
    #[error("degeneracy error: {0}")]
    Degenerate(String),

    /// A reference oracle failed its own self-consistency check.
    #[error("oracle error: {0}")]
    Oracle(String),

    /// Shape mismatch or broken internal invariant.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
