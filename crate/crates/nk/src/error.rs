//! Error type shared across the crate.

use thiserror::Error;

/// Errors raised by the numerical routines.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum NkError {
    #[error("order {order} exceeds the truncation limit {limit}")]
    OrderOverflow { order: usize, limit: usize },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("quadrature did not converge for k={k}: {coarse} vs {fine}")]
    Quadrature { k: usize, coarse: f64, fine: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid skeleton: {0}")]
    Skeleton(String),

    #[error("power iteration did not converge after {iterations} iterations (last estimate {estimate})")]
    PowerIteration { iterations: usize, estimate: f64 },

    #[error("edge {edge}: {msg}")]
    Edge { edge: String, msg: String },

    #[error("series diverges: {0}")]
    Divergence(String),

    #[error("term budget exceeded: {count} terms for {what} (cap {cap})")]
    TermCap { what: String, count: u64, cap: u64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, NkError>;
