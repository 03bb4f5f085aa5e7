//! UniVer: conditional-optimal-transport tree verification.
//!
//! The Allocation Phase walks the tree top-down. Each node `v` carries an
//! effective prefix acceptance probability `p_tilde`; the transport plan
//! between the scaled target `p_tilde * M_b(.|v)` and the residual draft
//! distribution yields marginal acceptance masses for every token, a
//! rejection mass, sibling-conditional probabilities for the traversal
//! order, and a fallback probability for accepting `v` itself. The
//! Decision Phase then scans the tree once in post-order, comparing one
//! uniform per node against the precomputed thresholds.
//!
//! Allocation is generic in the probability scalar so the oracle can rerun
//! it in exact rational arithmetic.

use num::rational::BigRational;

use crate::dist::{residual_without, DistOf};
use crate::error::{Error, Result};
use crate::model::ConditionalModel;
use crate::rng::UniformStream;
use crate::scalar::{abs_dev, Scalar};
use crate::tree::{grow_tree, DraftTree};
use crate::verifier::{CycleDist, EnumBudget, Outcome, Verifier};
use crate::Token;

/// Built-in corruptions for mutation testing. Each one breaks a different
/// step of the allocation so the lossless oracle can prove it notices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Mutation {
    /// Scale the prefix acceptance probability of the root's first child.
    ScaledPTilde(f64),
    /// Feed the allocation the masked draft distribution without
    /// renormalizing it.
    SkipResidualRenorm,
    /// Compute the normalization factor against the full draft
    /// distribution instead of the residual.
    WrongZForm,
}

impl Mutation {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "scaled-p-tilde" => Some(Self::ScaledPTilde(0.5)),
            "skip-residual-renorm" => Some(Self::SkipResidualRenorm),
            "wrong-z" => Some(Self::WrongZForm),
            _ => None,
        }
    }

    pub const NAMES: [&'static str; 3] = ["scaled-p-tilde", "skip-residual-renorm", "wrong-z"];
}

/// Normalization factor of the scaled transport plan:
/// `Z = 1 - p_tilde + sum_x [p_tilde*M_b(x) - M_s_res(x)]_+`.
pub fn normalization_factor<P: Scalar>(
    p_tilde: &P,
    target: &DistOf<P>,
    residual_draft: &DistOf<P>,
) -> P {
    let mut z = P::one() - p_tilde.clone();
    for (mb, ms) in target.probs().iter().zip(residual_draft.probs()) {
        z = z + (p_tilde.clone() * mb.clone()).pos_sub(ms);
    }
    z
}

/// The same factor through the min-form identity
/// `Z = 1 - sum_x min(p_tilde*M_b(x), M_s_res(x))`; independent of which
/// residual token was sampled. Used as a cross-check on
/// [`normalization_factor`].
pub fn normalization_factor_min_form<P: Scalar>(
    p_tilde: &P,
    target: &DistOf<P>,
    residual_draft: &DistOf<P>,
) -> P {
    let mut covered = P::zero();
    for (mb, ms) in target.probs().iter().zip(residual_draft.probs()) {
        covered = covered + P::min_of(p_tilde.clone() * mb.clone(), ms.clone());
    }
    P::one() - covered
}

/// Marginal acceptance masses and rejection mass for one node's children.
#[derive(Debug, Clone)]
pub struct ChildAllocation<P> {
    /// Marginal acceptance probability per vocabulary token (children and
    /// residual vocabulary alike).
    pub marginals: Vec<P>,
    /// Probability that the node itself is rejected.
    pub reject_mass: P,
    /// Normalization factor used for the plan.
    pub z: P,
}

fn clamp_unit<P: Scalar>(x: P, what: &str, relaxed: bool) -> Result<P> {
    let zero = P::zero();
    let one = P::one();
    if x < zero {
        if !relaxed && (zero.clone() - x.clone()).to_f64() > 1e-9 {
            return Err(Error::InternalNumerical(format!(
                "{what} = {} below 0",
                x.to_f64()
            )));
        }
        return Ok(zero);
    }
    if x > one {
        if !relaxed && (x.clone() - one.clone()).to_f64() > 1e-9 {
            return Err(Error::InternalNumerical(format!(
                "{what} = {} above 1",
                x.to_f64()
            )));
        }
        return Ok(one);
    }
    Ok(x)
}

/// Compute the marginal acceptance probabilities (Eqs. of the transport
/// plan) for one node at effective prefix probability `p_tilde`.
///
/// `top_tokens` are the deterministic children, `sampled_token` the
/// residual-sampled one. When `Z = 0` every bracket numerator vanishes and
/// the `(1 - p(u_m))/Z` factor is defined as 0, leaving the sampled token
/// as the sole mass.
pub fn allocate_children<P: Scalar>(
    p_tilde: &P,
    target_dist: &DistOf<P>,
    draft_dist: &DistOf<P>,
    top_tokens: &[Token],
    sampled_token: Token,
    mutation: Option<Mutation>,
) -> Result<ChildAllocation<P>> {
    let mutated = mutation.is_some();
    if target_dist.vocab_size() != draft_dist.vocab_size() {
        return Err(Error::VocabMismatch(
            target_dist.vocab_size(),
            draft_dist.vocab_size(),
        ));
    }
    if top_tokens.contains(&sampled_token) {
        return Err(Error::BadSample {
            token: sampled_token,
        });
    }

    let residual = if mutation == Some(Mutation::SkipResidualRenorm) {
        // Corruption: mask the top tokens but keep the lost mass.
        let mut probs = draft_dist.probs().to_vec();
        for &t in top_tokens {
            probs[t as usize] = P::zero();
        }
        DistOf::from_probs_unchecked(probs)
    } else if top_tokens.is_empty() {
        draft_dist.clone()
    } else {
        residual_without(draft_dist, top_tokens)?
    };

    let ms_sampled = residual.prob(sampled_token);
    if ms_sampled.is_zero() {
        return Err(Error::BadSample {
            token: sampled_token,
        });
    }

    let scaled_mb_sampled = p_tilde.clone() * target_dist.prob(sampled_token);
    let p_sampled = if scaled_mb_sampled.is_zero() {
        P::zero()
    } else {
        P::min_of(
            P::one(),
            scaled_mb_sampled.clone() / ms_sampled.clone(),
        )
    };
    // 1 - p(u_m) computed as a positive part to avoid cancellation when
    // the sampled token is nearly fully served.
    let survive = ms_sampled.pos_sub(&scaled_mb_sampled) / ms_sampled;

    let z = if mutation == Some(Mutation::WrongZForm) {
        normalization_factor(p_tilde, target_dist, draft_dist)
    } else {
        normalization_factor(p_tilde, target_dist, &residual)
    };
    if !mutated {
        let z_min = normalization_factor_min_form(p_tilde, target_dist, &residual);
        let dev = abs_dev(&z, &z_min);
        if dev > 1e-9 {
            return Err(Error::InternalNumerical(format!(
                "Z forms disagree by {dev}"
            )));
        }
    }

    let factor = if z > P::zero() {
        survive.clone() / z.clone()
    } else {
        P::zero()
    };

    let k = target_dist.vocab_size();
    let mut marginals = Vec::with_capacity(k);
    for token in 0..k as Token {
        let m = if token == sampled_token {
            p_sampled.clone()
        } else {
            let scaled = p_tilde.clone() * target_dist.prob(token);
            scaled.pos_sub(&residual.prob(token)) * factor.clone()
        };
        marginals.push(clamp_unit(m, "marginal", mutated)?);
    }

    let reject_raw = survive * (P::one() - p_tilde.clone());
    let reject_mass = clamp_unit(
        if z > P::zero() {
            reject_raw / z.clone()
        } else {
            P::zero()
        },
        "reject mass",
        mutated,
    )?;

    if !mutated {
        let total = marginals
            .iter()
            .fold(reject_mass.clone(), |acc, m| acc + m.clone());
        let dev = abs_dev(&total, &P::one());
        if dev > 1e-9 {
            return Err(Error::InternalNumerical(format!(
                "marginals + reject mass sum to 1{:+e}",
                total.to_f64() - 1.0
            )));
        }
    }

    Ok(ChildAllocation {
        marginals,
        reject_mass,
        z,
    })
}

/// Turn marginal child masses into the sibling-conditional probabilities
/// consumed by the post-order decision, plus the node's fallback
/// probability.
///
/// `p_tilde_j = p(u_j) / (1 - sum_{i<j} p(u_i))` with `0/0 -> 0`, and
/// `fallback = 1 - reject / (1 - sum_{i<=m} p(u_i))`; a vanishing fallback
/// denominator means the children consume everything, so fallback is 1
/// when the reject mass is also 0 and 0 otherwise. The denominators are
/// evaluated as suffix sums of the non-negative masses
/// (`sum_{i>=j} p(u_i) + residual_total + reject`), which is the same
/// quantity without the cancellation that `1 - prefix` suffers when the
/// children absorb nearly all mass.
pub fn conditional_chain<P: Scalar>(
    child_marginals: &[P],
    residual_total: &P,
    reject_mass: &P,
) -> Result<(Vec<P>, P)> {
    let tail = residual_total.clone() + reject_mass.clone();
    let mut suffix = vec![tail.clone()];
    for m in child_marginals.iter().rev() {
        suffix.push(suffix.last().expect("non-empty").clone() + m.clone());
    }
    suffix.reverse(); // suffix[j] = sum_{i>=j} p(u_i) + residual + reject
    let mut conds = Vec::with_capacity(child_marginals.len());
    for (j, m) in child_marginals.iter().enumerate() {
        let denom = &suffix[j];
        let cond = if m.is_zero() || !(*denom > P::zero()) {
            P::zero()
        } else {
            clamp_unit(m.clone() / denom.clone(), "conditional prob", false)?
        };
        conds.push(cond);
    }
    let fallback = if tail > P::zero() {
        clamp_unit(
            residual_total.clone() / tail,
            "fallback prob",
            false,
        )?
    } else {
        // Children consume everything; the fallback is unreachable and the
        // convention value keeps a unit root total.
        P::one()
    };
    Ok((conds, fallback))
}

/// Per-node allocation state.
#[derive(Debug, Clone)]
pub struct AllocatedNode<P> {
    /// Effective prefix acceptance probability of this node's chain.
    pub p_tilde: P,
    /// Full-vocabulary marginal masses (non-leaf only).
    pub marginals: Option<Vec<P>>,
    /// Probability of rejecting the node (non-leaf only).
    pub reject_mass: Option<P>,
    /// Conditional acceptance probabilities, aligned with the node's
    /// children order.
    pub cond_child_probs: Vec<P>,
    /// Probability of accepting the node itself after all children were
    /// rejected (non-leaf only).
    pub fallback_prob: Option<P>,
}

/// Allocation results for a whole tree, indexed like the tree's nodes.
#[derive(Debug, Clone)]
pub struct AllocatedTree<P> {
    nodes: Vec<AllocatedNode<P>>,
}

impl<P: Scalar> AllocatedTree<P> {
    pub fn node(&self, idx: usize) -> &AllocatedNode<P> {
        &self.nodes[idx]
    }

    pub fn nodes(&self) -> &[AllocatedNode<P>] {
        &self.nodes
    }

    /// Unnormalized bonus weights at a non-leaf: marginal masses outside
    /// the children set. Derived fresh from the marginals.
    pub fn residual_bonus_weights(&self, tree: &DraftTree, idx: usize) -> Vec<P> {
        let marg = self.nodes[idx]
            .marginals
            .as_ref()
            .expect("bonus weights only exist at non-leaves");
        let mut weights = marg.clone();
        for &c in &tree.node(idx).children {
            let t = tree.node(c).token.expect("children carry tokens");
            weights[t as usize] = P::zero();
        }
        weights
    }
}

/// Top-down Allocation Phase over a grown tree.
///
/// The root starts at `root_p_tilde` (1 for standard UniVer); every
/// non-leaf node's plan feeds conditional probabilities to its children in
/// breadth-first order, which is equivalent to the layer-parallel
/// formulation because a node only reads its own `p_tilde`.
pub fn allocate_tree<P: Scalar>(
    tree: &DraftTree,
    target: &ConditionalModel,
    root_p_tilde: P,
    mutation: Option<Mutation>,
) -> Result<AllocatedTree<P>> {
    let n = tree.len();
    let mut nodes: Vec<AllocatedNode<P>> = (0..n)
        .map(|_| AllocatedNode {
            p_tilde: P::zero(),
            marginals: None,
            reject_mass: None,
            cond_child_probs: Vec::new(),
            fallback_prob: None,
        })
        .collect();
    nodes[0].p_tilde = root_p_tilde;

    for idx in 0..n {
        let node = tree.node(idx);
        if node.is_leaf() {
            continue;
        }
        let target_dist: DistOf<P> = target.eval(&tree.context(idx))?.to_scalar();
        let draft_dist: DistOf<P> = node.draft_dist.to_scalar();
        let child_tokens: Vec<Token> = node
            .children
            .iter()
            .map(|&c| tree.node(c).token.expect("children carry tokens"))
            .collect();
        let (top_tokens, sampled_token) = child_tokens
            .split_last()
            .map(|(last, init)| (init, *last))
            .expect("non-leaf has children");
        let p_tilde = nodes[idx].p_tilde.clone();
        let alloc = allocate_children(
            &p_tilde,
            &target_dist,
            &draft_dist,
            top_tokens,
            sampled_token,
            mutation,
        )?;
        let child_marginals: Vec<P> = child_tokens
            .iter()
            .map(|&t| alloc.marginals[t as usize].clone())
            .collect();
        let (conds, fallback) = conditional_chain(&child_marginals, &alloc.reject_mass)?;
        for (j, &child) in node.children.iter().enumerate() {
            let mut p = conds[j].clone();
            if let Some(Mutation::ScaledPTilde(factor)) = mutation {
                // Corrupt exactly one node: the root's first child.
                if child == 1 {
                    p = p * P::from_f64(factor);
                }
            }
            nodes[child].p_tilde = p;
        }
        nodes[idx].marginals = Some(alloc.marginals);
        nodes[idx].reject_mass = Some(alloc.reject_mass);
        nodes[idx].cond_child_probs = conds;
        nodes[idx].fallback_prob = Some(fallback);
    }
    Ok(AllocatedTree { nodes })
}

/// Post-order Decision Phase.
///
/// Draws one uniform per node (bound to post-order position), accepts a
/// leaf `v` when `eta < p_tilde_v` and a non-leaf when
/// `eta < fallback_prob_v`, then samples the bonus token: from the target
/// at an accepted leaf, from the normalized residual marginals at an
/// accepted non-leaf. One extra draw samples the bonus.
pub fn decide(
    tree: &DraftTree,
    alloc: &AllocatedTree<f64>,
    target: &ConditionalModel,
    rng: &mut UniformStream,
) -> Result<Outcome> {
    let order = tree.post_order();
    let etas: Vec<f64> = order.iter().map(|_| rng.next_uniform()).collect();
    for (pos, &idx) in order.iter().enumerate() {
        let node = tree.node(idx);
        let threshold = if node.is_leaf() {
            alloc.node(idx).p_tilde
        } else {
            alloc.node(idx).fallback_prob.expect("non-leaf fallback")
        };
        if etas[pos] >= threshold {
            continue;
        }
        let bonus_token = if node.is_leaf() {
            let mb = target.eval(&tree.context(idx))?;
            mb.sample(rng.next_uniform())
        } else {
            let weights = alloc.residual_bonus_weights(tree, idx);
            let total: f64 = weights.iter().sum();
            if total <= 0.0 {
                // Unreachable: a positive fallback implies residual mass.
                return Err(Error::InternalNumerical(
                    "fallback fired with zero residual bonus mass".into(),
                ));
            }
            let dist = crate::dist::normalize(&weights)?;
            dist.sample(rng.next_uniform())
        };
        return Ok(Outcome {
            accepted_tokens: tree.chain_tokens(idx),
            bonus_token,
            stop_node: idx,
        });
    }
    Err(Error::NoAcceptance)
}

/// Grow, allocate and decide in one call.
pub fn verify_univer(
    target: &ConditionalModel,
    draft: &ConditionalModel,
    topo: &crate::tree::Topology,
    prefix: &[Token],
    rng: &mut UniformStream,
) -> Result<Outcome> {
    let tree = grow_tree(draft, topo, prefix, rng)?;
    let alloc = allocate_tree(&tree, target, 1.0, None)?;
    decide(&tree, &alloc, target, rng)
}

/// Exact output distribution of the Decision Phase for one fixed allocated
/// tree: thresholds are constants, so stop probabilities are products of
/// `p_tilde` / `(1 - p_tilde)` factors in post-order. Mass that survives
/// the whole scan (possible only with a modified root) is dropped.
pub fn decision_dist<P: Scalar>(
    tree: &DraftTree,
    alloc: &AllocatedTree<P>,
    target: &ConditionalModel,
) -> Result<CycleDist<P>> {
    let mut out = Vec::new();
    let mut survive = P::one();
    for idx in tree.post_order() {
        let node = tree.node(idx);
        let threshold = if node.is_leaf() {
            alloc.node(idx).p_tilde.clone()
        } else {
            alloc
                .node(idx)
                .fallback_prob
                .clone()
                .expect("non-leaf fallback")
        };
        let stop = survive.clone() * threshold.clone();
        if !stop.is_zero() {
            let chain = tree.chain_tokens(idx);
            if node.is_leaf() {
                let mb: DistOf<P> = target.eval(&tree.context(idx))?.to_scalar();
                for token in 0..mb.vocab_size() as Token {
                    let p = mb.prob(token);
                    if !p.is_zero() {
                        let mut seq = chain.clone();
                        seq.push(token);
                        out.push((seq, stop.clone() * p));
                    }
                }
            } else {
                let weights = alloc.residual_bonus_weights(tree, idx);
                let total = weights
                    .iter()
                    .fold(P::zero(), |acc, w| acc + w.clone());
                if !total.is_zero() {
                    for (token, w) in weights.iter().enumerate() {
                        if !w.is_zero() {
                            let mut seq = chain.clone();
                            seq.push(token as Token);
                            out.push((seq, stop.clone() * w.clone() / total.clone()));
                        }
                    }
                }
            }
        }
        survive = survive * (P::one() - threshold);
    }
    Ok(out)
}

/// UniVer as a registry strategy. `root_p_tilde` below 1 yields the
/// modified scheme used by the scaled-superiority checks; `mutation`
/// injects one of the built-in corruptions.
#[derive(Debug, Clone)]
pub struct UniVerVerifier {
    pub root_p_tilde: f64,
    pub mutation: Option<Mutation>,
}

impl Default for UniVerVerifier {
    fn default() -> Self {
        Self {
            root_p_tilde: 1.0,
            mutation: None,
        }
    }
}

impl UniVerVerifier {
    pub fn with_mutation(mutation: Mutation) -> Self {
        Self {
            root_p_tilde: 1.0,
            mutation: Some(mutation),
        }
    }

    pub fn with_root_p_tilde(root_p_tilde: f64) -> Self {
        Self {
            root_p_tilde,
            mutation: None,
        }
    }

    fn cycle_dist_generic<P: Scalar>(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &crate::tree::Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<P>> {
        let mut out: CycleDist<P> = Vec::new();
        let root = P::from_f64(self.root_p_tilde);
        crate::tree::for_each_tree(draft, topo, prefix, budget.cap(), &mut |tree, _p| {
            // Recompute the drafting weight in the oracle scalar so the
            // tree law and the allocation see identical residuals; in
            // rational mode this keeps the losslessness identity exact.
            let w = tree_draft_weight::<P>(tree)?;
            let alloc = allocate_tree::<P>(tree, target, root.clone(), self.mutation)?;
            let cycle = decision_dist(tree, &alloc, target)?;
            budget.charge(cycle.len() as u64)?;
            for (seq, p) in cycle {
                out.push((seq, w.clone() * p));
            }
            Ok(())
        })?;
        Ok(out)
    }
}

/// Drafting probability of a grown Greedy-strategy tree: the product over
/// non-leaf nodes of the residual probability of the sampled child.
fn tree_draft_weight<P: Scalar>(tree: &DraftTree) -> Result<P> {
    let mut weight = P::one();
    for node in tree.nodes() {
        if node.is_leaf() {
            continue;
        }
        let draft: DistOf<P> = node.draft_dist.to_scalar();
        let tokens: Vec<Token> = node
            .children
            .iter()
            .map(|&c| tree.node(c).token.expect("children carry tokens"))
            .collect();
        let (sampled, top) = tokens.split_last().expect("non-leaf has children");
        let residual = if top.is_empty() {
            draft
        } else {
            residual_without(&draft, top)?
        };
        weight = weight * residual.prob(*sampled);
    }
    Ok(weight)
}

impl Verifier for UniVerVerifier {
    fn name(&self) -> &'static str {
        "univer"
    }

    fn run_cycle(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &crate::tree::Topology,
        prefix: &[Token],
        rng: &mut UniformStream,
    ) -> Result<Outcome> {
        let tree = grow_tree(draft, topo, prefix, rng)?;
        let alloc = allocate_tree(&tree, target, self.root_p_tilde, self.mutation)?;
        decide(&tree, &alloc, target, rng)
    }

    fn cycle_dist(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &crate::tree::Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<f64>> {
        self.cycle_dist_generic(target, draft, topo, prefix, budget)
    }

    fn cycle_dist_rational(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &crate::tree::Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<BigRational>> {
        self.cycle_dist_generic(target, draft, topo, prefix, budget)
    }
}
