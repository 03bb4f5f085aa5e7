//! The verifier strategy interface and name registry.
//!
//! Every verification scheme is a [`Verifier`] trait object: it owns its
//! drafting law (Greedy sampling for the OT-based schemes, sequential
//! without-replacement sampling for the RRSw-based ones), a seeded
//! sampling path, and an exact enumeration path used by the oracle.

use num::rational::BigRational;

use crate::baselines::{GreedyVerifier, RrswVerifier, TraversalVerifier};
use crate::error::{Error, Result};
use crate::model::ConditionalModel;
use crate::rng::UniformStream;
use crate::tree::Topology;
use crate::univer::UniVerVerifier;
use crate::Token;

/// Result of one verification cycle: the accepted root-to-node chain plus
/// the bonus token sampled at the stopping node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Outcome {
    /// Accepted draft tokens below the prefix anchor (empty when only the
    /// anchor was accepted).
    pub accepted_tokens: Vec<Token>,
    pub bonus_token: Token,
    /// Index of the stopping node in the verifier's draft tree.
    pub stop_node: usize,
}

impl Outcome {
    /// Number of accepted draft tokens (the bonus token is not counted).
    pub fn accepted_count(&self) -> usize {
        self.accepted_tokens.len()
    }

    /// Tokens emitted by the cycle: accepted chain followed by the bonus.
    pub fn emitted(&self) -> Vec<Token> {
        let mut out = self.accepted_tokens.clone();
        out.push(self.bonus_token);
        out
    }
}

/// Budget shared across an exhaustive enumeration; counts trees times
/// decision branches.
#[derive(Debug, Clone)]
pub struct EnumBudget {
    cap: u64,
    used: u64,
}

impl EnumBudget {
    pub const DEFAULT_CAP: u64 = 1_000_000;

    pub fn new(cap: u64) -> Self {
        Self { cap, used: 0 }
    }

    pub fn charge(&mut self, n: u64) -> Result<()> {
        self.used = self.used.saturating_add(n);
        if self.used > self.cap {
            Err(Error::ExplosionCap { cap: self.cap })
        } else {
            Ok(())
        }
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }
}

impl Default for EnumBudget {
    fn default() -> Self {
        Self::new(Self::DEFAULT_CAP)
    }
}

/// Distribution over the token sequences one verification cycle can emit
/// (accepted chain plus bonus). Masses may sum below one only for
/// schemes that can reject everything (modified-root runs).
pub type CycleDist<P> = Vec<(Vec<Token>, P)>;

/// A tree verification strategy.
pub trait Verifier: Send + Sync {
    /// Registry name; also the CLI `--method` value.
    fn name(&self) -> &'static str;

    /// Whether the scheme ships without a losslessness guarantee.
    fn is_experimental(&self) -> bool {
        false
    }

    /// Draft a tree and run one verification cycle.
    fn run_cycle(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        rng: &mut UniformStream,
    ) -> Result<Outcome>;

    /// Exact one-cycle output distribution, marginalized over the
    /// verifier's drafting law and its decision randomness.
    fn cycle_dist(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<f64>>;

    /// [`Verifier::cycle_dist`] in exact rational arithmetic.
    fn cycle_dist_rational(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<BigRational>>;
}

/// Names accepted by [`make_verifier`], in registry order.
pub fn verifier_names() -> &'static [&'static str] {
    &["univer", "rrsw", "greedy", "traversal"]
}

/// Look up a verification strategy by name.
pub fn make_verifier(name: &str) -> Result<Box<dyn Verifier>> {
    match name {
        "univer" => Ok(Box::new(UniVerVerifier::default())),
        "rrsw" => Ok(Box::new(RrswVerifier)),
        "greedy" => Ok(Box::new(GreedyVerifier)),
        "traversal" => Ok(Box::new(TraversalVerifier)),
        other => Err(Error::BadConfig(format!(
            "unknown method '{other}' (expected one of {})",
            verifier_names().join(", ")
        ))),
    }
}
