//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by distribution ops, models, tree growth, verification
/// and the exact-enumeration oracle.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// All weights are zero (or the excluded set covers all mass).
    #[error("zero total mass")]
    ZeroMass,

    /// A weight was negative beyond the clamping band.
    #[error("negative weight {0} below clamping band")]
    NegativeWeight(f64),

    /// A probability vector does not sum close enough to 1.
    #[error("probability mass {0} deviates from 1 beyond 1e-6")]
    BadMass(f64),

    /// Two distributions over different vocabularies were combined.
    #[error("vocabulary size mismatch: {0} vs {1}")]
    VocabMismatch(usize, usize),

    /// A token id exceeds the vocabulary.
    #[error("token {token} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    /// Invalid experiment or model-pair configuration.
    #[error("bad config: {0}")]
    BadConfig(String),

    /// A node's draft distribution has fewer positive-mass tokens than the
    /// requested child count.
    #[error("insufficient support: {support} positive tokens < {required} children at depth {depth}")]
    InsufficientSupport {
        support: usize,
        required: usize,
        depth: usize,
    },

    /// Exhaustive enumeration exceeded the configured budget.
    #[error("enumeration exceeded cap of {cap}")]
    ExplosionCap { cap: u64 },

    /// The sampled child token has zero residual draft mass.
    #[error("sampled token {token} has zero residual draft mass")]
    BadSample { token: u32 },

    /// A candidate token with zero draft probability was verified.
    #[error("candidate token {token} has zero draft probability")]
    BadToken { token: u32 },

    /// The decision phase scanned the whole tree without an acceptance.
    /// Unreachable when the root prefix probability is 1; raised defensively.
    #[error("decision phase produced no acceptance")]
    NoAcceptance,

    /// A computed probability left the [-1e-9, 1+1e-9] clamping band,
    /// signalling a real bug rather than rounding.
    #[error("internal numerical error: {0}")]
    InternalNumerical(String),
}

pub type Result<T> = std::result::Result<T, Error>;
