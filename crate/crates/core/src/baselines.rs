//! Comparison verifiers: single-draft rejection sampling, RRSw tree
//! verification, the per-node Greedy OT plan, Local/Block chain
//! recurrences, and a best-effort Traversal verifier.
//!
//! The OT-based schemes (`greedy`, like `univer`) draft with the Greedy
//! sampling strategy; the RRSw-based schemes (`rrsw`, `traversal`) draft by
//! sequential without-replacement sampling, which is the candidate law
//! under which per-candidate rejection sampling is lossless.

use std::collections::HashMap;

use num::rational::BigRational;

use crate::dist::{normalize, normalize_scalar, residual_without, top_k, Dist, DistOf};
use crate::error::{Error, Result};
use crate::model::ConditionalModel;
use crate::rng::UniformStream;
use crate::scalar::Scalar;
use crate::tree::{grow_tree, grow_tree_wor, DraftTree, Topology};
use crate::univer::{allocate_children, conditional_chain};
use crate::verifier::{CycleDist, EnumBudget, Outcome, Verifier};
use crate::Token;

/// `min(1, num/den)` with the degenerate conventions used everywhere in
/// this crate: a zero numerator rejects (covers 0/0), a zero denominator
/// with positive numerator accepts.
fn ratio_threshold<P: Scalar>(num: P, den: P) -> P {
    if num.is_zero() {
        P::zero()
    } else if den.is_zero() {
        P::one()
    } else {
        P::min_of(P::one(), num / den)
    }
}

// ---------------------------------------------------------------------------
// Single-draft verification
// ---------------------------------------------------------------------------

/// Verify one draft token: accept iff `u < min(1, p(t)/q(t))`. On
/// rejection the corrected target is `normalize([p - q]_+)`.
pub fn verify_single(p: &Dist, q: &Dist, draft_token: Token, u: f64) -> Result<(bool, Option<Dist>)> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::VocabMismatch(p.vocab_size(), q.vocab_size()));
    }
    if q.prob(draft_token) == 0.0 {
        return Err(Error::BadToken { token: draft_token });
    }
    let threshold = ratio_threshold(p.prob(draft_token), q.prob(draft_token));
    if u < threshold {
        return Ok((true, None));
    }
    let residual: Vec<f64> = p
        .probs()
        .iter()
        .zip(q.probs())
        .map(|(&a, &b)| (a - b).max(0.0))
        .collect();
    Ok((false, Some(normalize(&residual)?)))
}

// ---------------------------------------------------------------------------
// Chain recurrences
// ---------------------------------------------------------------------------

/// Local heuristic: `p_k = prod_{i<=k} min(r_i, 1)`.
pub fn local_chain_probs(ratios: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    ratios
        .iter()
        .map(|&r| {
            acc *= r.min(1.0);
            acc
        })
        .collect()
}

/// Block verification: `p_k = min(r_k * p_{k-1}, 1)` with `p_0 = 1`,
/// letting a high density ratio recharge the prefix probability.
pub fn block_chain_probs(ratios: &[f64]) -> Vec<f64> {
    let mut acc = 1.0;
    ratios
        .iter()
        .map(|&r| {
            acc = (r * acc).min(1.0);
            acc
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Greedy single-step closed form
// ---------------------------------------------------------------------------

/// The single-step optimal acceptance rate under Greedy drafting:
/// `sum_{Top_{m-1}} M_b + sum_x min(M_b(x), M_s_res(x))`.
pub fn greedy_single_step_rate<P: Scalar>(
    target: &DistOf<P>,
    draft: &DistOf<P>,
    m: usize,
) -> Result<P> {
    let top = top_k(draft, m - 1);
    let residual = if top.is_empty() {
        draft.clone()
    } else {
        residual_without(draft, &top)?
    };
    let mut rate = P::zero();
    for &t in &top {
        rate = rate + target.prob(t);
    }
    for (mb, ms) in target.probs().iter().zip(residual.probs()) {
        rate = rate + P::min_of(mb.clone(), ms.clone());
    }
    Ok(rate)
}

// ---------------------------------------------------------------------------
// RRSw
// ---------------------------------------------------------------------------

/// Result of recursive rejection sampling over one node's candidates.
#[derive(Debug, Clone, PartialEq)]
pub enum RrswNodeResult {
    Accepted(Token),
    /// Every candidate was rejected; carries the final corrected target.
    Rejected(Dist),
}

/// Recursive rejection sampling without replacement over `candidates` in
/// order: each candidate is tested against the current residual pair, and
/// a rejection renormalizes the target residual and removes the candidate
/// from the draft residual. Consumes one uniform per tested candidate.
pub fn rrsw_node(
    p: &Dist,
    q: &Dist,
    candidates: &[Token],
    rng: &mut UniformStream,
) -> Result<RrswNodeResult> {
    let mut p_res = p.clone();
    // The draft residual can be exhausted by a candidate that carried all
    // remaining mass; later thresholds then see a zero denominator.
    let mut q_res: Option<Dist> = Some(q.clone());
    for (i, &t) in candidates.iter().enumerate() {
        let q_prob = q_res.as_ref().map_or(0.0, |d| d.prob(t));
        let threshold = ratio_threshold(p_res.prob(t), q_prob);
        if rng.next_uniform() < threshold {
            return Ok(RrswNodeResult::Accepted(t));
        }
        let corrected: Vec<f64> = p_res
            .probs()
            .iter()
            .enumerate()
            .map(|(x, &a)| {
                let b = q_res.as_ref().map_or(0.0, |d| d.prob(x as Token));
                (a - b).max(0.0)
            })
            .collect();
        p_res = normalize(&corrected)?;
        if i + 1 < candidates.len() {
            q_res = match q_res {
                Some(d) => residual_without(&d, &[t]).ok(),
                None => None,
            };
        }
    }
    Ok(RrswNodeResult::Rejected(p_res))
}

/// Vanilla RRSw tree verification: root-down, candidates in stored order,
/// descending into the accepted child; a node-level rejection emits the
/// bonus from the final corrected target, an accepted leaf from the
/// target itself.
pub fn verify_rrsw_tree(
    target: &ConditionalModel,
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    rng: &mut UniformStream,
) -> Result<Outcome> {
    let tree = grow_tree_wor(draft, topo, prefix, rng)?;
    let mut current = 0usize;
    loop {
        let node = tree.node(current);
        if node.is_leaf() {
            let mb = target.eval(&tree.context(current))?;
            let bonus_token = mb.sample(rng.next_uniform());
            return Ok(Outcome {
                accepted_tokens: tree.chain_tokens(current),
                bonus_token,
                stop_node: current,
            });
        }
        let p = target.eval(&tree.context(current))?;
        let candidates: Vec<Token> = node
            .children
            .iter()
            .map(|&c| tree.node(c).token.expect("children carry tokens"))
            .collect();
        match rrsw_node(&p, &node.draft_dist, &candidates, rng)? {
            RrswNodeResult::Accepted(tok) => {
                let pos = candidates.iter().position(|&t| t == tok).expect("candidate");
                current = node.children[pos];
            }
            RrswNodeResult::Rejected(residual) => {
                let bonus_token = residual.sample(rng.next_uniform());
                return Ok(Outcome {
                    accepted_tokens: tree.chain_tokens(current),
                    bonus_token,
                    stop_node: current,
                });
            }
        }
    }
}

/// Exact one-cycle output distribution of the RRSw verifier, marginalized
/// over without-replacement drafting and the acceptance uniforms. Memoized
/// per context: subtree outcomes depend only on the accepted chain.
fn rrsw_cycle_dist<P: Scalar>(
    target: &ConditionalModel,
    draft: &ConditionalModel,
    widths: &[usize],
    ctx: &[Token],
    depth: usize,
    budget: &mut EnumBudget,
    memo: &mut HashMap<Vec<Token>, CycleDist<P>>,
) -> Result<CycleDist<P>> {
    if let Some(hit) = memo.get(ctx) {
        return Ok(hit.clone());
    }
    let mut out: CycleDist<P> = Vec::new();
    if depth == widths.len() {
        let mb: DistOf<P> = target.eval(ctx)?.to_scalar();
        for y in 0..mb.vocab_size() as Token {
            let p = mb.prob(y);
            if !p.is_zero() {
                out.push((vec![y], p));
            }
        }
        budget.charge(out.len() as u64)?;
        memo.insert(ctx.to_vec(), out.clone());
        return Ok(out);
    }
    let m = widths[depth];
    let p0: DistOf<P> = target.eval(ctx)?.to_scalar();
    let q0: DistOf<P> = draft.eval(ctx)?.to_scalar();
    if q0.support_size() < m {
        return Err(Error::InsufficientSupport {
            support: q0.support_size(),
            required: m,
            depth,
        });
    }

    // Depth-first over (candidate draw, accept/reject) branches.
    struct Frame<P> {
        p_res: DistOf<P>,
        q_res: DistOf<P>,
        slots: usize,
        weight: P,
    }
    let mut stack = vec![Frame {
        p_res: p0,
        q_res: q0,
        slots: m,
        weight: P::one(),
    }];
    while let Some(frame) = stack.pop() {
        let support: Vec<Token> = frame.q_res.support().collect();
        for c in support {
            let w_c = frame.weight.clone() * frame.q_res.prob(c);
            let threshold = ratio_threshold(frame.p_res.prob(c), frame.q_res.prob(c));
            if !threshold.is_zero() {
                let mut child_ctx = ctx.to_vec();
                child_ctx.push(c);
                let sub = rrsw_cycle_dist(target, draft, widths, &child_ctx, depth + 1, budget, memo)?;
                let accept_w = w_c.clone() * threshold.clone();
                for (s, p) in &sub {
                    let mut seq = vec![c];
                    seq.extend_from_slice(s);
                    out.push((seq, accept_w.clone() * p.clone()));
                }
                budget.charge(sub.len() as u64)?;
            }
            let reject = P::one() - threshold;
            if reject.is_zero() {
                continue;
            }
            let corrected: Vec<P> = frame
                .p_res
                .probs()
                .iter()
                .zip(frame.q_res.probs())
                .map(|(a, b)| a.pos_sub(b))
                .collect();
            let p_next = normalize_scalar(&corrected)?;
            let reject_w = w_c * reject;
            if frame.slots == 1 {
                for y in 0..p_next.vocab_size() as Token {
                    let p = p_next.prob(y);
                    if !p.is_zero() {
                        out.push((vec![y], reject_w.clone() * p));
                    }
                }
                budget.charge(p_next.support_size() as u64)?;
            } else {
                stack.push(Frame {
                    p_res: p_next,
                    q_res: residual_without(&frame.q_res, &[c])?,
                    slots: frame.slots - 1,
                    weight: reject_w,
                });
            }
        }
    }
    memo.insert(ctx.to_vec(), out.clone());
    Ok(out)
}

/// Standard recursive rejection sampling without replacement applied
/// independently at each node.
#[derive(Debug, Clone, Copy, Default)]
pub struct RrswVerifier;

impl Verifier for RrswVerifier {
    fn name(&self) -> &'static str {
        "rrsw"
    }

    fn run_cycle(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        rng: &mut UniformStream,
    ) -> Result<Outcome> {
        verify_rrsw_tree(target, draft, topo, prefix, rng)
    }

    fn cycle_dist(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<f64>> {
        let mut memo = HashMap::new();
        rrsw_cycle_dist(target, draft, topo.widths(), prefix, 0, budget, &mut memo)
    }

    fn cycle_dist_rational(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<BigRational>> {
        let mut memo = HashMap::new();
        rrsw_cycle_dist(target, draft, topo.widths(), prefix, 0, budget, &mut memo)
    }
}

// ---------------------------------------------------------------------------
// Greedy tree verifier
// ---------------------------------------------------------------------------

/// Single-step OT verification applied independently at each accepted
/// node: the plan is the UniVer allocation frozen at `p_tilde = 1`, so at
/// every node either one child is accepted or a bonus token is emitted
/// from the residual marginals (the reject mass vanishes at 1).
pub fn verify_greedy_tree(
    target: &ConditionalModel,
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    rng: &mut UniformStream,
) -> Result<Outcome> {
    let tree = grow_tree(draft, topo, prefix, rng)?;
    let mut current = 0usize;
    'descend: loop {
        let node = tree.node(current);
        if node.is_leaf() {
            let mb = target.eval(&tree.context(current))?;
            let bonus_token = mb.sample(rng.next_uniform());
            return Ok(Outcome {
                accepted_tokens: tree.chain_tokens(current),
                bonus_token,
                stop_node: current,
            });
        }
        let target_dist = target.eval(&tree.context(current))?;
        let child_tokens: Vec<Token> = node
            .children
            .iter()
            .map(|&c| tree.node(c).token.expect("children carry tokens"))
            .collect();
        let (top, sampled) = child_tokens
            .split_last()
            .map(|(last, init)| (init, *last))
            .expect("non-leaf has children");
        let alloc = allocate_children(&1.0, &target_dist, &node.draft_dist, top, sampled, None)?;
        let child_marginals: Vec<f64> = child_tokens
            .iter()
            .map(|&t| alloc.marginals[t as usize])
            .collect();
        let (conds, _fallback) = conditional_chain(&child_marginals, &alloc.reject_mass)?;
        for (j, &child) in node.children.iter().enumerate() {
            if rng.next_uniform() < conds[j] {
                current = child;
                continue 'descend;
            }
        }
        // All children rejected; at p_tilde = 1 the fallback always fires.
        let mut weights = alloc.marginals;
        for &t in &child_tokens {
            weights[t as usize] = 0.0;
        }
        let bonus = normalize(&weights)?;
        let bonus_token = bonus.sample(rng.next_uniform());
        return Ok(Outcome {
            accepted_tokens: tree.chain_tokens(current),
            bonus_token,
            stop_node: current,
        });
    }
}

/// Exact one-cycle output distribution of the Greedy verifier. The layer
/// output at `p_tilde = 1` has no reject mass, so the bonus contribution
/// of token `y` is exactly its marginal. Memoized per context.
fn greedy_cycle_dist<P: Scalar>(
    target: &ConditionalModel,
    draft: &ConditionalModel,
    widths: &[usize],
    ctx: &[Token],
    depth: usize,
    budget: &mut EnumBudget,
    memo: &mut HashMap<Vec<Token>, CycleDist<P>>,
) -> Result<CycleDist<P>> {
    if let Some(hit) = memo.get(ctx) {
        return Ok(hit.clone());
    }
    let mut out: CycleDist<P> = Vec::new();
    if depth == widths.len() {
        let mb: DistOf<P> = target.eval(ctx)?.to_scalar();
        for y in 0..mb.vocab_size() as Token {
            let p = mb.prob(y);
            if !p.is_zero() {
                out.push((vec![y], p));
            }
        }
        budget.charge(out.len() as u64)?;
        memo.insert(ctx.to_vec(), out.clone());
        return Ok(out);
    }
    let m = widths[depth];
    let target_dist: DistOf<P> = target.eval(ctx)?.to_scalar();
    let draft_f64 = draft.eval(ctx)?;
    let draft_dist: DistOf<P> = draft_f64.to_scalar();
    let support = draft_dist.support_size();
    if support < m {
        return Err(Error::InsufficientSupport {
            support,
            required: m,
            depth,
        });
    }
    let top = top_k(&draft_dist, m - 1);
    let residual = if top.is_empty() {
        draft_dist.clone()
    } else {
        residual_without(&draft_dist, &top)?
    };
    let one = P::one();
    for sampled in residual.support() {
        let w = residual.prob(sampled);
        let alloc = allocate_children(&one, &target_dist, &draft_dist, &top, sampled, None)?;
        let child_tokens: Vec<Token> = top.iter().copied().chain(std::iter::once(sampled)).collect();
        for &t in &child_tokens {
            let mass = alloc.marginals[t as usize].clone();
            if mass.is_zero() {
                continue;
            }
            let mut child_ctx = ctx.to_vec();
            child_ctx.push(t);
            let sub = greedy_cycle_dist(target, draft, widths, &child_ctx, depth + 1, budget, memo)?;
            let w_accept = w.clone() * mass;
            for (s, p) in &sub {
                let mut seq = vec![t];
                seq.extend_from_slice(s);
                out.push((seq, w_accept.clone() * p.clone()));
            }
            budget.charge(sub.len() as u64)?;
        }
        for y in 0..alloc.marginals.len() as Token {
            if child_tokens.contains(&y) {
                continue;
            }
            let mass = alloc.marginals[y as usize].clone();
            if !mass.is_zero() {
                out.push((vec![y], w.clone() * mass));
            }
        }
        budget.charge(1)?;
    }
    memo.insert(ctx.to_vec(), out.clone());
    Ok(out)
}

/// Per-node Greedy OT verification (vertically myopic).
#[derive(Debug, Clone, Copy, Default)]
pub struct GreedyVerifier;

impl Verifier for GreedyVerifier {
    fn name(&self) -> &'static str {
        "greedy"
    }

    fn run_cycle(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        rng: &mut UniformStream,
    ) -> Result<Outcome> {
        verify_greedy_tree(target, draft, topo, prefix, rng)
    }

    fn cycle_dist(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<f64>> {
        let mut memo = HashMap::new();
        greedy_cycle_dist(target, draft, topo.widths(), prefix, 0, budget, &mut memo)
    }

    fn cycle_dist_rational(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<BigRational>> {
        let mut memo = HashMap::new();
        greedy_cycle_dist(target, draft, topo.widths(), prefix, 0, budget, &mut memo)
    }
}

// ---------------------------------------------------------------------------
// Traversal verifier (experimental)
// ---------------------------------------------------------------------------

/// One horizontal rejection step of the credit-tracked scaled layer:
/// given the current credit and residual pair, the unserved target is
/// `[credit*P - Q]_+` and the expected rejection mass is
/// `1 - sum min(credit*P, Q)`; the new credit is their ratio.
fn traversal_reject_update<P: Scalar>(
    credit: &P,
    p_res: &DistOf<P>,
    q_res: &DistOf<P>,
) -> (P, DistOf<P>) {
    let mut unserved = Vec::with_capacity(p_res.vocab_size());
    let mut mu = P::zero();
    let mut covered = P::zero();
    for (pt, q) in p_res.probs().iter().zip(q_res.probs()) {
        let scaled = credit.clone() * pt.clone();
        covered = covered + P::min_of(scaled.clone(), q.clone());
        let u = scaled.pos_sub(q);
        mu = mu + u.clone();
        unserved.push(u);
    }
    let rejected = P::one() - covered;
    if mu.is_zero() || !(rejected > P::zero()) {
        return (P::zero(), p_res.clone());
    }
    let next_credit = P::min_of(P::one(), mu.clone() / rejected);
    let next_target = DistOf::from_probs_unchecked(
        unserved.into_iter().map(|u| u / mu.clone()).collect(),
    );
    (next_credit, next_target)
}

fn traversal_visit(
    tree: &DraftTree,
    target: &ConditionalModel,
    idx: usize,
    beta: f64,
    rng: &mut UniformStream,
) -> Result<Option<Outcome>> {
    let node = tree.node(idx);
    debug_assert!(!node.is_leaf());
    let mut p_res = target.eval(&tree.context(idx))?;
    let mut q_res = node.draft_dist.clone();
    let mut credit = beta;
    let child_count = node.children.len();
    for (i, &child) in node.children.iter().enumerate() {
        let t = tree.node(child).token.expect("children carry tokens");
        let chain_prob = ratio_threshold(credit * p_res.prob(t), q_res.prob(t));
        if tree.node(child).is_leaf() {
            if rng.next_uniform() < chain_prob {
                let mb = target.eval(&tree.context(child))?;
                let bonus_token = mb.sample(rng.next_uniform());
                return Ok(Some(Outcome {
                    accepted_tokens: tree.chain_tokens(child),
                    bonus_token,
                    stop_node: child,
                }));
            }
        } else if let Some(outcome) = traversal_visit(tree, target, child, chain_prob, rng)? {
            return Ok(Some(outcome));
        }
        // Whole child subtree rejected: fold the rejection into the layer
        // residuals before testing the next sibling.
        let (c2, p2) = traversal_reject_update(&credit, &p_res, &q_res);
        credit = c2;
        p_res = p2;
        if i + 1 < child_count {
            q_res = residual_without(&q_res, &[t])?;
        }
    }
    // Fallback to the node itself with the remaining credit.
    if credit > 0.0 && rng.next_uniform() < credit {
        let bonus_token = p_res.sample(rng.next_uniform());
        return Ok(Some(Outcome {
            accepted_tokens: tree.chain_tokens(idx),
            bonus_token,
            stop_node: idx,
        }));
    }
    Ok(None)
}

/// Best-effort Traversal verification: post-order scan with block-style
/// joint prefix probabilities vertically and RRSw-style residual updates
/// horizontally among siblings. Experimental; losslessness is checked
/// empirically per configuration, not asserted.
pub fn verify_traversal_tree(
    target: &ConditionalModel,
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    rng: &mut UniformStream,
) -> Result<Outcome> {
    let tree = grow_tree_wor(draft, topo, prefix, rng)?;
    match traversal_visit(&tree, target, 0, 1.0, rng)? {
        Some(outcome) => Ok(outcome),
        None => Err(Error::NoAcceptance),
    }
}

/// Exact one-cycle output distribution of the traversal verifier for a
/// subtree entered with chain probability `beta`. Total mass is the
/// subtree's (expected) acceptance probability.
fn traversal_cycle_dist<P: Scalar>(
    target: &ConditionalModel,
    draft: &ConditionalModel,
    widths: &[usize],
    ctx: &[Token],
    depth: usize,
    beta: P,
    budget: &mut EnumBudget,
) -> Result<CycleDist<P>> {
    let m = widths[depth];
    let p0: DistOf<P> = target.eval(ctx)?.to_scalar();
    let q0: DistOf<P> = draft.eval(ctx)?.to_scalar();
    if q0.support_size() < m {
        return Err(Error::InsufficientSupport {
            support: q0.support_size(),
            required: m,
            depth,
        });
    }
    let mut out: CycleDist<P> = Vec::new();
    traversal_layer(
        target, draft, widths, ctx, depth, &beta, &p0, &q0, m, P::one(), budget, &mut out,
    )?;
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn traversal_layer<P: Scalar>(
    target: &ConditionalModel,
    draft: &ConditionalModel,
    widths: &[usize],
    ctx: &[Token],
    depth: usize,
    credit: &P,
    p_res: &DistOf<P>,
    q_res: &DistOf<P>,
    slots: usize,
    weight: P,
    budget: &mut EnumBudget,
    out: &mut CycleDist<P>,
) -> Result<()> {
    if slots == 0 {
        // Fallback to the subtree root with the remaining credit.
        if !credit.is_zero() {
            for y in 0..p_res.vocab_size() as Token {
                let p = p_res.prob(y);
                if !p.is_zero() {
                    out.push((Vec::new(), weight.clone() * credit.clone() * p));
                    // The empty chain is filled in by the caller; token
                    // appended below.
                    let last = out.len() - 1;
                    out[last].0.push(y);
                }
            }
            budget.charge(p_res.support_size() as u64)?;
        }
        return Ok(());
    }
    for c in q_res.support().collect::<Vec<_>>() {
        let w_c = weight.clone() * q_res.prob(c);
        let chain_prob = ratio_threshold(credit.clone() * p_res.prob(c), q_res.prob(c));
        let mut child_ctx = ctx.to_vec();
        child_ctx.push(c);
        let accepted_mass;
        if depth + 1 == widths.len() {
            // Leaf child: direct threshold acceptance, bonus from target.
            if !chain_prob.is_zero() {
                let mb: DistOf<P> = target.eval(&child_ctx)?.to_scalar();
                for y in 0..mb.vocab_size() as Token {
                    let p = mb.prob(y);
                    if !p.is_zero() {
                        out.push((vec![c, y], w_c.clone() * chain_prob.clone() * p));
                    }
                }
                budget.charge(mb.support_size() as u64)?;
            }
            accepted_mass = chain_prob;
        } else {
            let sub = traversal_cycle_dist(
                target,
                draft,
                widths,
                &child_ctx,
                depth + 1,
                chain_prob,
                budget,
            )?;
            let mut mass = P::zero();
            for (s, p) in &sub {
                mass = mass + p.clone();
                let mut seq = vec![c];
                seq.extend_from_slice(s);
                out.push((seq, w_c.clone() * p.clone()));
            }
            budget.charge(sub.len() as u64)?;
            accepted_mass = mass;
        }
        let reject = P::one().pos_sub(&accepted_mass);
        if reject.is_zero() {
            continue;
        }
        let (c2, p2) = traversal_reject_update(credit, p_res, q_res);
        let q2 = if slots > 1 {
            residual_without(q_res, &[c])?
        } else {
            q_res.clone()
        };
        traversal_layer(
            target,
            draft,
            widths,
            ctx,
            depth,
            &c2,
            &p2,
            &q2,
            slots - 1,
            w_c * reject,
            budget,
            out,
        )?;
    }
    Ok(())
}

/// Experimental Traversal verification.
#[derive(Debug, Clone, Copy, Default)]
pub struct TraversalVerifier;

impl Verifier for TraversalVerifier {
    fn name(&self) -> &'static str {
        "traversal"
    }

    fn is_experimental(&self) -> bool {
        true
    }

    fn run_cycle(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        rng: &mut UniformStream,
    ) -> Result<Outcome> {
        verify_traversal_tree(target, draft, topo, prefix, rng)
    }

    fn cycle_dist(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<f64>> {
        traversal_cycle_dist(target, draft, topo.widths(), prefix, 0, 1.0, budget)
    }

    fn cycle_dist_rational(
        &self,
        target: &ConditionalModel,
        draft: &ConditionalModel,
        topo: &Topology,
        prefix: &[Token],
        budget: &mut EnumBudget,
    ) -> Result<CycleDist<BigRational>> {
        traversal_cycle_dist(
            target,
            draft,
            topo.widths(),
            prefix,
            0,
            Scalar::one(),
            budget,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{make_pair, ModelPairConfig, TargetFamily};

    fn dist(probs: &[f64]) -> Dist {
        Dist::new(probs.to_vec()).unwrap()
    }

    fn pair(drift: f64, seed: u64) -> (ConditionalModel, ConditionalModel) {
        make_pair(&ModelPairConfig {
            vocab: 5,
            family: TargetFamily::SeededRandom,
            seed,
            drift,
            temperature: 1.0,
            concentration: 1.0,
        })
        .unwrap()
    }

    // verify_single ---------------------------------------------------------

    #[test]
    fn identical_distributions_always_accept() {
        let d = dist(&[0.4, 0.6]);
        for u in [0.0, 0.5, 0.999] {
            let (accepted, residual) = verify_single(&d, &d, 1, u).unwrap();
            assert!(accepted);
            assert!(residual.is_none());
        }
    }

    #[test]
    fn verify_single_residual_matches_hand_computation() {
        // p = [0.5, 0.5], q = [1, 0], t = 0: accept prob 0.5, residual [0, 1].
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[1.0, 0.0]);
        let (accepted, _) = verify_single(&p, &q, 0, 0.49).unwrap();
        assert!(accepted);
        let (accepted, residual) = verify_single(&p, &q, 0, 0.5).unwrap();
        assert!(!accepted);
        assert_eq!(residual.unwrap().probs(), &[0.0, 1.0]);
    }

    #[test]
    fn dominating_target_accepts_with_probability_one() {
        let p = dist(&[0.7, 0.3]);
        let q = dist(&[0.6, 0.4]);
        let (accepted, _) = verify_single(&p, &q, 0, 0.999_999).unwrap();
        assert!(accepted);
    }

    #[test]
    fn verify_single_rejects_zero_draft_token() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[1.0, 0.0]);
        assert!(matches!(
            verify_single(&p, &q, 1, 0.1),
            Err(Error::BadToken { token: 1 })
        ));
    }

    #[test]
    fn acceptance_rate_over_draft_sampling_equals_overlap() {
        // E_{t~q}[min(1, p/q)] = sum_x min(p, q).
        let p = dist(&[0.15, 0.25, 0.6]);
        let q = dist(&[0.3, 0.25, 0.45]);
        let rate: f64 = (0..3u32)
            .map(|t| q.prob(t) * (p.prob(t) / q.prob(t)).min(1.0))
            .sum();
        let ov = crate::dist::overlap(&p, &q).unwrap();
        assert!((rate - ov).abs() < 1e-12);
    }

    // chain recurrences -------------------------------------------------------

    #[test]
    fn local_chain_truncates_then_multiplies() {
        let p = local_chain_probs(&[0.5, 2.0]);
        assert_eq!(p, vec![0.5, 0.5]);
        assert_eq!(local_chain_probs(&[2.0, 3.0]), vec![1.0, 1.0]);
        assert_eq!(local_chain_probs(&[0.0, 0.7]), vec![0.0, 0.0]);
    }

    #[test]
    fn block_chain_recharges() {
        let p = block_chain_probs(&[0.5, 2.0]);
        assert_eq!(p, vec![0.5, 1.0]);
        assert_eq!(block_chain_probs(&[2.0, 3.0]), vec![1.0, 1.0]);
    }

    #[test]
    fn block_dominates_local_pointwise() {
        let mut rng = UniformStream::new(40);
        for _ in 0..1_000 {
            let n = 1 + (rng.next_u64() % 6) as usize;
            let ratios: Vec<f64> = (0..n).map(|_| rng.next_uniform() * 3.0).collect();
            let local = local_chain_probs(&ratios);
            let block = block_chain_probs(&ratios);
            for (l, b) in local.iter().zip(&block) {
                assert!(b >= l, "block {b} < local {l} for {ratios:?}");
            }
        }
    }

    // rrsw_node ----------------------------------------------------------------

    #[test]
    fn rrsw_single_candidate_reduces_to_verify_single() {
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.9, 0.1]);
        // Acceptance threshold for token 0 is 5/9 in both.
        for seed in 0..50 {
            let mut r1 = UniformStream::new(seed);
            let mut r2 = r1.clone();
            let u = r2.next_uniform();
            let via_node = rrsw_node(&p, &q, &[0], &mut r1).unwrap();
            let (accepted, residual) = verify_single(&p, &q, 0, u).unwrap();
            match via_node {
                RrswNodeResult::Accepted(t) => {
                    assert!(accepted);
                    assert_eq!(t, 0);
                }
                RrswNodeResult::Rejected(res) => {
                    assert!(!accepted);
                    assert_eq!(res, residual.unwrap());
                }
            }
        }
    }

    #[test]
    fn rrsw_two_step_residuals_match_hand_computation() {
        // p = [0.5, 0.5], q = [0.9, 0.1]: token 0 accepted w.p. 5/9; after
        // rejection p' = [0, 1], q' = [0, 1], token 1 accepted w.p. 1.
        let p = dist(&[0.5, 0.5]);
        let q = dist(&[0.9, 0.1]);
        let mut accepted0 = 0u32;
        let n = 20_000;
        for seed in 0..n {
            let mut rng = UniformStream::derive(7, seed as u64);
            match rrsw_node(&p, &q, &[0, 1], &mut rng).unwrap() {
                RrswNodeResult::Accepted(0) => accepted0 += 1,
                RrswNodeResult::Accepted(1) => {}
                other => panic!("unexpected {other:?}"),
            }
        }
        let freq = f64::from(accepted0) / f64::from(n);
        assert!((freq - 5.0 / 9.0).abs() < 0.01, "freq {freq}");
    }

    #[test]
    fn rrsw_exhausted_support_rejects_without_dividing_by_zero() {
        // Candidates cover the whole support; the final residual is the
        // deterministic leftover.
        let p = dist(&[0.0, 1.0]);
        let q = dist(&[1.0, 0.0]);
        let mut rng = UniformStream::new(3);
        match rrsw_node(&p, &q, &[0], &mut rng).unwrap() {
            RrswNodeResult::Rejected(res) => assert_eq!(res.probs(), &[0.0, 1.0]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rrsw_one_layer_without_replacement_is_lossless() {
        // Exact enumeration of the layer for K <= 5: candidate tuples drawn
        // without replacement, thresholds integrated analytically; the
        // output distribution (accepted candidate or final-residual bonus)
        // must equal the target.
        fn enumerate_layer(
            p: &Dist,
            q: &Dist,
            m: usize,
        ) -> Vec<f64> {
            fn step(
                p_res: &Dist,
                q_res: &Dist,
                slots: usize,
                weight: f64,
                out: &mut Vec<f64>,
            ) {
                for c in q_res.support().collect::<Vec<_>>() {
                    let w_c = weight * q_res.prob(c);
                    let thr = (p_res.prob(c) / q_res.prob(c)).min(1.0);
                    out[c as usize] += w_c * thr;
                    let rej = 1.0 - thr;
                    if rej <= 0.0 {
                        continue;
                    }
                    let corrected: Vec<f64> = p_res
                        .probs()
                        .iter()
                        .zip(q_res.probs())
                        .map(|(&a, &b)| (a - b).max(0.0))
                        .collect();
                    let p2 = normalize(&corrected).unwrap();
                    if slots == 1 {
                        for y in 0..p2.vocab_size() as Token {
                            out[y as usize] += w_c * rej * p2.prob(y);
                        }
                    } else {
                        let q2 = residual_without(q_res, &[c]).unwrap();
                        step(&p2, &q2, slots - 1, w_c * rej, out);
                    }
                }
            }
            let mut out = vec![0.0; p.vocab_size()];
            step(p, q, m, 1.0, &mut out);
            out
        }

        let mut rng = UniformStream::new(60);
        for _ in 0..50 {
            let k = 3 + (rng.next_u64() % 3) as usize;
            let pw: Vec<f64> = (0..k).map(|_| rng.next_uniform() + 0.01).collect();
            let qw: Vec<f64> = (0..k).map(|_| rng.next_uniform() + 0.01).collect();
            let p = normalize(&pw).unwrap();
            let q = normalize(&qw).unwrap();
            let m = 1 + (rng.next_u64() % k as u64) as usize;
            let layer = enumerate_layer(&p, &q, m);
            for (t, &mass) in layer.iter().enumerate() {
                assert!(
                    (mass - p.prob(t as Token)).abs() < 1e-10,
                    "token {t}: {mass} vs {} (K={k}, m={m})",
                    p.prob(t as Token)
                );
            }
        }
    }

    // tree verifiers -------------------------------------------------------------

    type VerifyFn = fn(
        &ConditionalModel,
        &ConditionalModel,
        &Topology,
        &[Token],
        &mut UniformStream,
    ) -> Result<Outcome>;

    const ALL_BASELINES: [(&str, VerifyFn); 3] = [
        ("rrsw", verify_rrsw_tree),
        ("greedy", verify_greedy_tree),
        ("traversal", verify_traversal_tree),
    ];

    #[test]
    fn perfect_drafter_chains_fully_accept_everywhere() {
        let (target, draft) = pair(0.0, 10);
        let topo = Topology::new(vec![1, 1, 1]).unwrap();
        for (name, f) in ALL_BASELINES {
            for seed in 0..10 {
                let mut rng = UniformStream::new(seed);
                let o = f(&target, &draft, &topo, &[1], &mut rng).unwrap();
                assert_eq!(o.accepted_count(), 3, "{name} seed {seed}");
            }
        }
    }

    #[test]
    fn verifiers_are_deterministic_under_fixed_seed() {
        let (target, draft) = pair(0.6, 4);
        let topo = Topology::new(vec![2, 2]).unwrap();
        for (name, f) in ALL_BASELINES {
            let mut r1 = UniformStream::new(99);
            let mut r2 = UniformStream::new(99);
            let o1 = f(&target, &draft, &topo, &[], &mut r1).unwrap();
            let o2 = f(&target, &draft, &topo, &[], &mut r2).unwrap();
            assert_eq!(o1, o2, "{name}");
        }
    }

    #[test]
    fn greedy_layer_acceptance_is_independent_of_descendants() {
        // The depth-0 plan of a deep greedy run equals the depth-1-tree
        // plan: vertical myopia by construction.
        let (target, draft) = pair(0.5, 12);
        let shallow = Topology::new(vec![2]).unwrap();
        let deep = Topology::new(vec![2, 2]).unwrap();
        let mut b1 = EnumBudget::default();
        let mut b2 = EnumBudget::default();
        let d_shallow = GreedyVerifier
            .cycle_dist(&target, &draft, &shallow, &[], &mut b1)
            .unwrap();
        let d_deep = GreedyVerifier
            .cycle_dist(&target, &draft, &deep, &[], &mut b2)
            .unwrap();
        // Marginal over the first emitted token agrees.
        let first_token_mass = |d: &CycleDist<f64>, t: Token| -> f64 {
            d.iter()
                .filter(|(s, _)| s[0] == t)
                .map(|(_, p)| *p)
                .sum()
        };
        for t in 0..5u32 {
            assert!(
                (first_token_mass(&d_shallow, t) - first_token_mass(&d_deep, t)).abs() < 1e-10
            );
        }
    }

    #[test]
    fn traversal_chain_leaf_acceptance_matches_block_probs() {
        // On an m = 1 chain the deepest-first threshold is exactly the
        // Block recurrence: Pr[N = depth] = E[p_depth^Block].
        let (target, draft) = pair(0.7, 33);
        let depth = 3;
        let topo = Topology::new(vec![1; depth]).unwrap();
        let mut budget = EnumBudget::default();
        let cycle = TraversalVerifier
            .cycle_dist(&target, &draft, &topo, &[], &mut budget)
            .unwrap();
        let full_mass: f64 = cycle
            .iter()
            .filter(|(s, _)| s.len() == depth + 1)
            .map(|(_, p)| *p)
            .sum();

        // Independent route: enumerate chains, apply the Block recurrence.
        fn walk(
            target: &ConditionalModel,
            draft: &ConditionalModel,
            ctx: &mut Vec<Token>,
            depth_left: usize,
            ratios: &mut Vec<f64>,
            weight: f64,
            acc: &mut f64,
        ) {
            if depth_left == 0 {
                let block = block_chain_probs(ratios);
                *acc += weight * block.last().unwrap();
                return;
            }
            let p = target.eval(ctx).unwrap();
            let q = draft.eval(ctx).unwrap();
            for t in q.support().collect::<Vec<_>>() {
                ctx.push(t);
                ratios.push(p.prob(t) / q.prob(t));
                walk(
                    target,
                    draft,
                    ctx,
                    depth_left - 1,
                    ratios,
                    weight * q.prob(t),
                    acc,
                );
                ratios.pop();
                ctx.pop();
            }
        }
        let mut acc = 0.0;
        walk(&target, &draft, &mut Vec::new(), depth, &mut Vec::new(), 1.0, &mut acc);
        assert!(
            (full_mass - acc).abs() < 1e-10,
            "traversal {full_mass} vs block {acc}"
        );
    }

    #[test]
    fn greedy_single_step_rate_worked_example() {
        // p_tilde = 1 worked example: 0.2 + (0 + 0.5 + 0.25) = 0.95.
        let mb = dist(&[0.2, 0.5, 0.3]);
        let ms = dist(&[0.6, 0.3, 0.1]);
        let rate = greedy_single_step_rate(&mb, &ms, 2).unwrap();
        assert!((rate - 0.95).abs() < 1e-12);
    }
}
