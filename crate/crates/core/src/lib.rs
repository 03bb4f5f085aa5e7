//! Verification laboratory for tree-based speculative decoding.
//!
//! The crate implements a family of interchangeable tree verifiers over
//! synthetic conditional token models:
//!
//! - `univer` — conditional-optimal-transport tree verification with a
//!   top-down allocation phase and a post-order decision phase;
//! - `greedy` — the per-node optimal-transport plan applied independently
//!   at each accepted node;
//! - `rrsw` — recursive rejection sampling without replacement applied
//!   independently at each node;
//! - `traversal` — experimental chain-joint verification combining
//!   block-style vertical probabilities with RRSw sibling fallbacks.
//!
//! Each verifier sits behind the [`verifier::Verifier`] trait and is
//! selected by name at runtime. The [`oracle`] module machine-checks
//! losslessness, per-node optimality and cross-verifier superiority by
//! exhaustive enumeration (optionally in exact rational arithmetic), and
//! provides the seeded Monte Carlo benchmark harness.

pub mod baselines;
pub mod dist;
pub mod error;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod scalar;
pub mod tree;
pub mod univer;
pub mod verifier;

/// Token id within a finite vocabulary.
pub type Token = u32;

pub use dist::{apply_temperature, normalize, overlap, residual_without, top_k, Dist, DistOf, Vocab};
pub use error::{Error, Result};
pub use model::{make_pair, ConditionalModel, ModelPairConfig, TargetFamily};
pub use rng::UniformStream;
pub use tree::{enumerate_trees, grow_tree, grow_tree_wor, DraftTree, Topology};
pub use verifier::{make_verifier, verifier_names, Outcome, Verifier};
