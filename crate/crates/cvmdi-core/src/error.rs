//! Error type shared by every module of the crate.

use thiserror::Error;

/// Errors produced by covariance-matrix algebra, sampling, estimation and
/// rate computations.
#[derive(Debug, Error)]
pub enum CoreError {
    /// An input is outside the mathematical domain of the operation
    /// (non-symmetric matrix, transmissivity outside `[0, 1]`, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The computation is well posed but numerically degenerate
    /// (singular conditioning block, non-PSD matrix from rounding, ...).
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Second-moment data too degenerate to solve for displacement
    /// coefficients.
    #[error("singular moments: {0}")]
    SingularMoments(String),

    /// The block size is too small for the requested confidence level
    /// (the chi-squared half-width would reach or exceed 1).
    #[error("block too small: {0}")]
    BlockTooSmall(String),

    /// Data that is formally valid but carries no usable signal
    /// (zero-variance column, empty batch, ...).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// Projection onto an event of probability zero.
    #[error("empty support: {0}")]
    EmptySupport(String),

    /// The caller combined operations in an unsupported way
    /// (missing displaced columns, mismatched batch shapes, ...).
    #[error("usage error: {0}")]
    Usage(String),
}

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, CoreError>;
