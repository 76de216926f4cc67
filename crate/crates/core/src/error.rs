//! Error type shared across the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("class index {index} out of range for {num_classes} classes")]
    InvalidClassIndex { index: usize, num_classes: usize },

    #[error("negative ball radius {radius}")]
    NegativeRadius { radius: f64 },

    #[error("{context} requires p = inf")]
    RequiresInfNorm { context: &'static str },

    #[error("{context} is only supported up to dimension {max}, got {dim}")]
    DimTooLarge {
        context: &'static str,
        dim: usize,
        max: usize,
    },

    #[error("gradient norm {norm:e} below {min:e}; {context} is singular there")]
    GradNormTooSmall {
        context: &'static str,
        norm: f64,
        min: f64,
    },

    #[error("{context} requires twice-differentiable activations (tanh/identity)")]
    RequiresSmoothActivations { context: &'static str },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: &'static str },

    /// Update gradient became non-finite; carries the norm trace collected up
    /// to the aborted iteration so the divergence can still be reported.
    #[error("non-finite update gradient at iteration {iter}")]
    NonFiniteUpdate { iter: usize, trace: Vec<f64> },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("model format error at line {line}: {msg}")]
    ModelFormat { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
