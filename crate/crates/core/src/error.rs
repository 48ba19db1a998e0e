use thiserror::Error;

/// Errors raised by the library. Each variant names the offending input.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum CboError {
    #[error("unknown objective `{0}` (expected quadratic, quartic_quad, rastrigin or ackley)")]
    UnknownObjective(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value in {context} at index {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("objective returned a non-finite value at particle {particle} (step {step})")]
    NonFiniteObjective { particle: usize, step: u64 },

    #[error(
        "proximal solver did not converge: residual {residual:e} after {iterations} iterations"
    )]
    ProxNotConverged { residual: f64, iterations: usize },

    #[error("importance weights degenerate: effective sample size {ess:.2} < 10")]
    DegenerateWeights { ess: f64 },

    #[error("assignment size {n} exceeds exact-solver limit {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("too few blocks for a contraction fit: {found} < {required}")]
    TooFewBlocks { found: usize, required: usize },

    #[error("precondition violated: {0}")]
    Precondition(String),
}

pub type Result<T> = std::result::Result<T, CboError>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> CboError {
    CboError::InvalidParameter {
        name,
        reason: reason.into(),
    }
}
