//! Exact verification of the losslessness, optimality and superiority
//! properties by exhaustive enumeration at small scale, plus the seeded
//! Monte Carlo benchmark harness.
//!
//! Acceptance thresholds are known constants once a tree is fixed, so the
//! probability of any verifier output integrates exactly as products of
//! threshold factors; no decision uniform is ever sampled here. Checks run
//! in `f64` with 1e-9 tolerances by default, or in exact rational
//! arithmetic where every deviation must be literally zero.

use std::collections::BTreeMap;

use num::rational::BigRational;
use serde::Serialize;


use crate::dist::{residual_without, top_k, Dist, DistOf};
use crate::error::{Error, Result};
use crate::model::{make_pair, ConditionalModel, ModelPairConfig, TargetFamily};
use crate::rng::{mix2, UniformStream};
use crate::scalar::{abs_dev, Scalar};
use crate::tree::Topology;
use crate::univer::{allocate_children, Mutation, UniVerVerifier};
use crate::verifier::{CycleDist, EnumBudget, Verifier};
use crate::Token;

// ---------------------------------------------------------------------------
// Output distributions
// ---------------------------------------------------------------------------

/// Distribution over fixed-horizon output sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputDist<P> {
    map: BTreeMap<Vec<Token>, P>,
}

impl<P: Scalar> OutputDist<P> {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Vec<Token>, P)>) -> Self {
        let mut map: BTreeMap<Vec<Token>, P> = BTreeMap::new();
        for (seq, p) in pairs {
            match map.get_mut(&seq) {
                Some(acc) => *acc = acc.clone() + p,
                None => {
                    map.insert(seq, p);
                }
            }
        }
        Self { map }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Vec<Token>, &P)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn mass(&self) -> P {
        self.map
            .values()
            .fold(P::zero(), |acc, p| acc + p.clone())
    }

    pub fn prob(&self, seq: &[Token]) -> P {
        self.map.get(seq).cloned().unwrap_or_else(P::zero)
    }

    /// Total variation distance `0.5 * sum |p - q|` over the union of
    /// supports, computed in the scalar.
    pub fn total_variation(&self, other: &Self) -> P {
        let mut l1 = P::zero();
        for (seq, p) in &self.map {
            let q = other.prob(seq);
            l1 = l1 + p.pos_sub(&q) + q.pos_sub(p);
        }
        for (seq, q) in &other.map {
            if !self.map.contains_key(seq) {
                l1 = l1 + q.clone();
            }
        }
        l1 * P::from_f64(0.5)
    }
}

/// Extend cycle outputs to a fixed horizon by exact autoregressive
/// continuation under the target model.
pub fn extend_to_horizon<P: Scalar>(
    cycle: CycleDist<P>,
    target: &ConditionalModel,
    prefix: &[Token],
    horizon: usize,
    budget: &mut EnumBudget,
) -> Result<OutputDist<P>> {
    // Merge duplicate short sequences first so each is extended once.
    let merged = OutputDist::from_pairs(cycle);
    let mut out: BTreeMap<Vec<Token>, P> = BTreeMap::new();
    for (seq, mass) in merged.map {
        extend_rec(seq, mass, target, prefix, horizon, budget, &mut out)?;
    }
    Ok(OutputDist { map: out })
}

fn extend_rec<P: Scalar>(
    seq: Vec<Token>,
    mass: P,
    target: &ConditionalModel,
    prefix: &[Token],
    horizon: usize,
    budget: &mut EnumBudget,
    out: &mut BTreeMap<Vec<Token>, P>,
) -> Result<()> {
    if seq.len() >= horizon {
        debug_assert_eq!(seq.len(), horizon, "cycle output longer than horizon");
        budget.charge(1)?;
        match out.get_mut(&seq) {
            Some(acc) => *acc = acc.clone() + mass,
            None => {
                out.insert(seq, mass);
            }
        }
        return Ok(());
    }
    let mut ctx = prefix.to_vec();
    ctx.extend_from_slice(&seq);
    let mb: DistOf<P> = target.eval(&ctx)?.to_scalar();
    for y in 0..mb.vocab_size() as Token {
        let p = mb.prob(y);
        if p.is_zero() {
            continue;
        }
        let mut next = seq.clone();
        next.push(y);
        extend_rec(next, mass.clone() * p, target, prefix, horizon, budget, out)?;
    }
    Ok(())
}

/// The target's autoregressive distribution over `horizon` tokens — the
/// reference side of every losslessness comparison.
pub fn target_output_dist<P: Scalar>(
    target: &ConditionalModel,
    prefix: &[Token],
    horizon: usize,
    budget: &mut EnumBudget,
) -> Result<OutputDist<P>> {
    extend_to_horizon(vec![(Vec::new(), P::one())], target, prefix, horizon, budget)
}

/// Exact distribution over one verification cycle extended to horizon
/// `depth + 1`.
pub fn exact_output_dist(
    verifier: &dyn Verifier,
    target: &ConditionalModel,
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    budget: &mut EnumBudget,
) -> Result<OutputDist<f64>> {
    let cycle = verifier.cycle_dist(target, draft, topo, prefix, budget)?;
    extend_to_horizon(cycle, target, prefix, topo.depth() + 1, budget)
}

/// [`exact_output_dist`] in exact rational arithmetic.
pub fn exact_output_dist_rational(
    verifier: &dyn Verifier,
    target: &ConditionalModel,
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    budget: &mut EnumBudget,
) -> Result<OutputDist<BigRational>> {
    let cycle = verifier.cycle_dist_rational(target, draft, topo, prefix, budget)?;
    extend_to_horizon(cycle, target, prefix, topo.depth() + 1, budget)
}

/// Expected accepted draft tokens per cycle, `E_T E_eta[accepted_count]`,
/// by exact enumeration (the bonus token is not counted).
pub fn exact_acceptance_length(
    verifier: &dyn Verifier,
    target: &ConditionalModel,
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    budget: &mut EnumBudget,
) -> Result<f64> {
    let cycle = verifier.cycle_dist(target, draft, topo, prefix, budget)?;
    Ok(cycle
        .iter()
        .map(|(seq, p)| (seq.len() - 1) as f64 * p)
        .sum())
}

// ---------------------------------------------------------------------------
// Check reports
// ---------------------------------------------------------------------------

/// Machine-readable result of one oracle check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckReport {
    pub check: String,
    pub max_abs_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    /// Guaranteed present on failure; carries the worst-case configuration.
    pub witness: Option<String>,
    /// Experimental checks do not gate the suite exit code.
    pub experimental: bool,
}

impl CheckReport {
    pub fn evaluate(check: impl Into<String>, dev: f64, tolerance: f64, witness: String) -> Self {
        let pass = dev <= tolerance;
        Self {
            check: check.into(),
            max_abs_deviation: dev,
            tolerance,
            pass,
            witness: Some(witness),
            experimental: false,
        }
    }

    pub fn experimental(mut self) -> Self {
        self.experimental = true;
        self
    }
}

// ---------------------------------------------------------------------------
// Theorem checks
// ---------------------------------------------------------------------------

/// Expectation identity of the locally lossless allocation: enumerating
/// the residual sample `u_m` with its drafting weight, the expected
/// marginal of every token must equal `p_tilde * M_b(t)`.
pub fn check_local_lossless(
    p_tilde: f64,
    target_dist: &Dist,
    draft_dist: &Dist,
    m: usize,
) -> Result<CheckReport> {
    let top = top_k(draft_dist, m - 1);
    if draft_dist.support_size() < m {
        return Err(Error::InsufficientSupport {
            support: draft_dist.support_size(),
            required: m,
            depth: 0,
        });
    }
    let residual = if top.is_empty() {
        draft_dist.clone()
    } else {
        residual_without(draft_dist, &top)?
    };
    let k = target_dist.vocab_size();
    let mut expected = vec![0.0f64; k];
    for u_m in residual.support().collect::<Vec<_>>() {
        let w = residual.prob(u_m);
        let alloc = allocate_children(&p_tilde, target_dist, draft_dist, &top, u_m, None)?;
        for (t, marg) in alloc.marginals.iter().enumerate() {
            expected[t] += w * marg;
        }
    }
    let mut dev = 0.0f64;
    let mut worst = 0usize;
    for t in 0..k {
        let want = p_tilde * target_dist.prob(t as Token);
        let d = (expected[t] - want).abs();
        if d > dev {
            dev = d;
            worst = t;
        }
    }
    Ok(CheckReport::evaluate(
        "local-lossless",
        dev,
        1e-9,
        format!("p_tilde={p_tilde} K={k} m={m} worst_token={worst}"),
    ))
}

/// Conditional optimality: the achieved conditional acceptance rate
/// (enumerated) must equal both the closed form
/// `sum_top p*M_b + sum_x min(p*M_b, M_s_res)` and the scaled-OT upper
/// bound (deterministic top mass plus the diagonal bound).
pub fn check_conditional_optimality(
    p_tilde: f64,
    target_dist: &Dist,
    draft_dist: &Dist,
    m: usize,
) -> Result<CheckReport> {
    let top = top_k(draft_dist, m - 1);
    if draft_dist.support_size() < m {
        return Err(Error::InsufficientSupport {
            support: draft_dist.support_size(),
            required: m,
            depth: 0,
        });
    }
    let residual = if top.is_empty() {
        draft_dist.clone()
    } else {
        residual_without(draft_dist, &top)?
    };

    // Route 1: enumerate the residual sample and add up child marginals.
    let mut achieved = 0.0f64;
    for u_m in residual.support().collect::<Vec<_>>() {
        let w = residual.prob(u_m);
        let alloc = allocate_children(&p_tilde, target_dist, draft_dist, &top, u_m, None)?;
        let mut layer = 0.0;
        for &t in top.iter().chain(std::iter::once(&u_m)) {
            layer += alloc.marginals[t as usize];
        }
        achieved += w * layer;
    }

    // Route 2: the closed form.
    let mut closed = 0.0f64;
    for &t in &top {
        closed += p_tilde * target_dist.prob(t);
    }
    for (mb, ms) in target_dist.probs().iter().zip(residual.probs()) {
        closed += (p_tilde * mb).min(*ms);
    }

    // Route 3: scaled-OT bound, diagonal term accumulated separately.
    let mut diag = 0.0f64;
    for (mb, ms) in target_dist.probs().iter().zip(residual.probs()) {
        diag += ms.min(p_tilde * mb);
    }
    let top_mass: f64 = top.iter().map(|&t| p_tilde * target_dist.prob(t)).sum();
    let bound = top_mass + diag;

    let dev = (achieved - closed).abs().max((achieved - bound).abs());
    Ok(CheckReport::evaluate(
        "conditional-optimality",
        dev,
        1e-9,
        format!(
            "p_tilde={p_tilde} K={} m={m} achieved={achieved} closed={closed} bound={bound}",
            target_dist.vocab_size()
        ),
    ))
}

/// Scaled superiority: the modified scheme with root prefix probability
/// `root_p_tilde` must reach at least `root_p_tilde` times the Greedy
/// acceptance length; `root_p_tilde = 1` is the plain superiority claim.
pub fn check_superiority(
    target: &ConditionalModel,
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    root_p_tilde: f64,
    budget: &mut EnumBudget,
) -> Result<CheckReport> {
    let modified = UniVerVerifier::with_root_p_tilde(root_p_tilde);
    let e_mod = exact_acceptance_length(&modified, target, draft, topo, prefix, budget)?;
    let e_greedy = exact_acceptance_length(
        &crate::baselines::GreedyVerifier,
        target,
        draft,
        topo,
        prefix,
        budget,
    )?;
    let deficit = (root_p_tilde * e_greedy - e_mod).max(0.0);
    Ok(CheckReport::evaluate(
        if root_p_tilde == 1.0 {
            "superiority"
        } else {
            "scaled-superiority"
        },
        deficit,
        1e-12,
        format!(
            "root_p_tilde={root_p_tilde} widths={:?} e_mod={e_mod} e_greedy={e_greedy}",
            topo.widths()
        ),
    ))
}

// ---------------------------------------------------------------------------
// Monte Carlo harness
// ---------------------------------------------------------------------------

/// Aggregate statistics of a seeded Monte Carlo run.
#[derive(Debug, Clone, PartialEq)]
pub struct McStats {
    pub trials: u64,
    pub mean: f64,
    pub stderr: f64,
    /// `depth_tail[d]` counts trials with at least `d + 1` accepted tokens.
    pub depth_tail: Vec<u64>,
}

impl McStats {
    /// Conditional per-depth acceptance rate: reaching depth `d + 1` given
    /// depth `d` was reached.
    pub fn depth_rate(&self, depth: usize) -> Option<f64> {
        let reached_prev = if depth == 0 {
            self.trials
        } else {
            *self.depth_tail.get(depth - 1)?
        };
        let reached = *self.depth_tail.get(depth)?;
        if reached_prev == 0 {
            None
        } else {
            Some(reached as f64 / reached_prev as f64)
        }
    }
}

/// Run `trials` independent verification cycles with per-trial seed
/// streams derived from `(master_seed, trial index)`. The result is
/// independent of `workers`: trials are assigned by stride and aggregated
/// in index order.
pub fn monte_carlo_acceptance(
    verifier: &dyn Verifier,
    target: &ConditionalModel,
    draft: &ConditionalModel,
    topo: &Topology,
    prefix: &[Token],
    trials: u64,
    master_seed: u64,
    workers: usize,
) -> Result<McStats> {
    let workers = workers.max(1);
    let mut counts: Vec<usize> = vec![0; trials as usize];
    if workers == 1 {
        for (i, slot) in counts.iter_mut().enumerate() {
            let mut rng = UniformStream::derive(master_seed, i as u64);
            *slot = verifier
                .run_cycle(target, draft, topo, prefix, &mut rng)?
                .accepted_count();
        }
    } else {
        let results: Vec<Result<Vec<(usize, usize)>>> = std::thread::scope(|scope| {
            let mut handles = Vec::with_capacity(workers);
            for w in 0..workers {
                let handle = scope.spawn(move || {
                    let mut local = Vec::new();
                    let mut i = w;
                    while (i as u64) < trials {
                        let mut rng = UniformStream::derive(master_seed, i as u64);
                        let outcome = verifier.run_cycle(target, draft, topo, prefix, &mut rng)?;
                        local.push((i, outcome.accepted_count()));
                        i += workers;
                    }
                    Ok(local)
                });
                handles.push(handle);
            }
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        for chunk in results {
            for (i, c) in chunk? {
                counts[i] = c;
            }
        }
    }

    let n = trials as f64;
    let mean = counts.iter().map(|&c| c as f64).sum::<f64>() / n;
    let stderr = if trials > 1 {
        let var = counts
            .iter()
            .map(|&c| {
                let d = c as f64 - mean;
                d * d
            })
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    let mut depth_tail = vec![0u64; topo.depth()];
    for &c in &counts {
        for (d, slot) in depth_tail.iter_mut().enumerate() {
            if c >= d + 1 {
                *slot += 1;
            }
        }
    }
    Ok(McStats {
        trials,
        mean,
        stderr,
        depth_tail,
    })
}

// ---------------------------------------------------------------------------
// The lossless acceptance suite
// ---------------------------------------------------------------------------

/// One configuration of the stock lossless suite.
#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub name: String,
    pub models: ModelPairConfig,
    pub widths: Vec<usize>,
}

/// The stock suite: the cartesian grid of tree shapes and drift levels,
/// with the vocabulary size cycling through 3..=6 and a deterministic
/// per-config seed.
pub fn lossless_suite_configs() -> Vec<SuiteConfig> {
    let widths_options: [&[usize]; 5] = [&[1], &[2], &[2, 2], &[3], &[2, 2, 2]];
    let drifts = [0.0, 0.3, 0.7, 1.0];
    let mut configs = Vec::new();
    for (wi, widths) in widths_options.iter().enumerate() {
        for (di, &drift) in drifts.iter().enumerate() {
            let i = wi * drifts.len() + di;
            let vocab = 3 + i % 4;
            let family = if i % 5 == 2 {
                TargetFamily::Markov1
            } else {
                TargetFamily::SeededRandom
            };
            configs.push(SuiteConfig {
                name: format!("suite-{i:02}-k{vocab}-w{}-e{drift}", tag(widths)),
                models: ModelPairConfig {
                    vocab,
                    family,
                    seed: mix2(0x5017e, i as u64),
                    drift,
                    temperature: 1.0,
                    concentration: 1.0,
                },
                widths: widths.to_vec(),
            });
        }
    }
    configs
}

fn tag(widths: &[usize]) -> String {
    widths
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// Options for one lossless-suite run.
#[derive(Debug, Clone, Default)]
pub struct SuiteOptions {
    /// Run in exact rational arithmetic on the small-config subset; every
    /// deviation must be exactly zero.
    pub rational: bool,
    /// Inject a built-in corruption into the UniVer allocation.
    pub mutation: Option<Mutation>,
}

/// Run the lossless suite and return one report per (config, method)
/// pair: total-variation against the target autoregressive distribution
/// plus an output-mass closure check. Traversal results are flagged
/// experimental and do not gate the suite.
pub fn run_lossless_suite(opts: &SuiteOptions) -> Result<Vec<CheckReport>> {
    let mut reports = Vec::new();
    let configs: Vec<SuiteConfig> = lossless_suite_configs()
        .into_iter()
        .filter(|c| {
            if opts.rational {
                // Exact arithmetic is slow; keep the enumeration tiny.
                c.models.vocab <= 4 && c.widths.iter().sum::<usize>() <= 4
            } else {
                true
            }
        })
        .collect();
    for config in &configs {
        let (target, draft) = make_pair(&config.models)?;
        let topo = Topology::new(config.widths.clone())?;
        let methods: Vec<Box<dyn Verifier>> = if opts.mutation.is_some() {
            vec![Box::new(UniVerVerifier {
                root_p_tilde: 1.0,
                mutation: opts.mutation,
            })]
        } else {
            vec![
                Box::new(UniVerVerifier::default()),
                Box::new(crate::baselines::RrswVerifier),
                Box::new(crate::baselines::GreedyVerifier),
                Box::new(crate::baselines::TraversalVerifier),
            ]
        };
        for method in &methods {
            let experimental = method.is_experimental();
            let (tv, mass_dev) = if opts.rational {
                let mut budget = EnumBudget::default();
                let dist = exact_output_dist_rational(
                    method.as_ref(),
                    &target,
                    &draft,
                    &topo,
                    &[],
                    &mut budget,
                )?;
                let reference: OutputDist<BigRational> =
                    target_output_dist(&target, &[], topo.depth() + 1, &mut budget)?;
                let tv = dist.total_variation(&reference).to_f64();
                let mass_dev = abs_dev(&dist.mass(), &Scalar::one());
                (tv, mass_dev)
            } else {
                let mut budget = EnumBudget::default();
                let dist =
                    exact_output_dist(method.as_ref(), &target, &draft, &topo, &[], &mut budget)?;
                let reference: OutputDist<f64> =
                    target_output_dist(&target, &[], topo.depth() + 1, &mut budget)?;
                (dist.total_variation(&reference), (dist.mass() - 1.0).abs())
            };
            let tolerance = if opts.rational { 0.0 } else { 1e-9 };
            let mut tv_report = CheckReport::evaluate(
                format!("lossless-{}", method.name()),
                tv,
                tolerance,
                config.name.clone(),
            );
            let mut mass_report = CheckReport::evaluate(
                format!("output-mass-{}", method.name()),
                mass_dev,
                tolerance,
                config.name.clone(),
            );
            if experimental {
                tv_report = tv_report.experimental();
                mass_report = mass_report.experimental();
            }
            reports.push(tv_report);
            reports.push(mass_report);
        }
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------
// Randomized inputs for the theorem sweeps
// ---------------------------------------------------------------------------

/// Full-support random distribution from a uniform stream.
pub fn random_dist(rng: &mut UniformStream, k: usize) -> Dist {
    let weights: Vec<f64> = (0..k).map(|_| rng.next_uniform_open()).collect();
    crate::dist::normalize(&weights).expect("positive weights")
}

/// Random distribution with a few zero entries while keeping at least
/// `min_support` positive tokens.
pub fn random_sparse_dist(rng: &mut UniformStream, k: usize, min_support: usize) -> Dist {
    let mut weights: Vec<f64> = (0..k).map(|_| rng.next_uniform_open()).collect();
    let mut support = k;
    for i in 0..k {
        if support > min_support && rng.next_uniform() < 0.25 {
            weights[i] = 0.0;
            support -= 1;
        }
    }
    crate::dist::normalize(&weights).expect("positive weights")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{greedy_single_step_rate, GreedyVerifier, RrswVerifier};
    use crate::univer::{allocate_tree, decision_dist};

    fn dist(probs: &[f64]) -> Dist {
        Dist::new(probs.to_vec()).unwrap()
    }

    fn aligned_pair(seed: u64) -> (ConditionalModel, ConditionalModel) {
        make_pair(&ModelPairConfig {
            vocab: 4,
            family: TargetFamily::SeededRandom,
            seed,
            drift: 0.0,
            temperature: 1.0,
            concentration: 1.0,
        })
        .unwrap()
    }

    fn misaligned_pair(seed: u64, k: usize) -> (ConditionalModel, ConditionalModel) {
        make_pair(&ModelPairConfig {
            vocab: k,
            family: TargetFamily::SeededRandom,
            seed,
            drift: 0.6,
            temperature: 1.0,
            concentration: 1.0,
        })
        .unwrap()
    }

    #[test]
    fn perfectly_aligned_models_give_zero_tv_at_any_depth() {
        let (target, draft) = aligned_pair(19);
        for depth in 1..=3 {
            let topo = Topology::new(vec![1; depth]).unwrap();
            let mut budget = EnumBudget::default();
            let dist = exact_output_dist(
                &UniVerVerifier::default(),
                &target,
                &draft,
                &topo,
                &[],
                &mut budget,
            )
            .unwrap();
            let reference: OutputDist<f64> =
                target_output_dist(&target, &[], depth + 1, &mut budget).unwrap();
            assert!(dist.total_variation(&reference) < 1e-12);
        }
    }

    #[test]
    fn univer_is_lossless_on_a_random_small_config() {
        let (target, draft) = misaligned_pair(5, 3);
        let topo = Topology::new(vec![2]).unwrap();
        let mut budget = EnumBudget::default();
        let dist = exact_output_dist(
            &UniVerVerifier::default(),
            &target,
            &draft,
            &topo,
            &[],
            &mut budget,
        )
        .unwrap();
        let reference: OutputDist<f64> =
            target_output_dist(&target, &[], 2, &mut budget).unwrap();
        let tv = dist.total_variation(&reference);
        assert!(tv <= 1e-9, "tv {tv}");
        assert!((dist.mass() - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn corrupted_allocation_is_detected() {
        let (target, draft) = misaligned_pair(5, 3);
        let topo = Topology::new(vec![2]).unwrap();
        let mut budget = EnumBudget::default();
        let mutated = UniVerVerifier::with_mutation(Mutation::ScaledPTilde(0.5));
        let dist =
            exact_output_dist(&mutated, &target, &draft, &topo, &[], &mut budget).unwrap();
        let reference: OutputDist<f64> =
            target_output_dist(&target, &[], 2, &mut budget).unwrap();
        let tv = dist.total_variation(&reference);
        assert!(tv > 1e-3, "mutation invisible: tv {tv}");
    }

    #[test]
    fn acceptance_length_of_perfect_chain_is_depth() {
        let (target, draft) = aligned_pair(2);
        for depth in 1..=3 {
            let topo = Topology::new(vec![1; depth]).unwrap();
            let mut budget = EnumBudget::default();
            let n = exact_acceptance_length(
                &UniVerVerifier::default(),
                &target,
                &draft,
                &topo,
                &[],
                &mut budget,
            )
            .unwrap();
            assert!((n - depth as f64).abs() < 1e-9, "depth {depth}: {n}");
        }
    }

    #[test]
    fn worked_example_acceptance_lengths() {
        // Fixed tree with sampled child 1: E[N | T] = 4/15 + 2/3 = 14/15.
        // Marginalized over trees, the depth-1 expectation equals the
        // conditional-optimality rate 0.95.
        let target = ConditionalModel::Fixed {
            dist: dist(&[0.2, 0.5, 0.3]),
        };
        let draft = ConditionalModel::Fixed {
            dist: dist(&[0.6, 0.3, 0.1]),
        };
        let topo = Topology::new(vec![2]).unwrap();
        // Fixed-tree route: find a seed whose residual sample is token 1.
        let tree = (0u64..)
            .find_map(|seed| {
                let mut rng = UniformStream::new(seed);
                let t = crate::tree::grow_tree(&draft, &topo, &[], &mut rng).unwrap();
                (t.node(t.node(0).children[1]).token == Some(1)).then_some(t)
            })
            .unwrap();
        let alloc = allocate_tree(&tree, &target, 1.0, None).unwrap();
        let cycle = decision_dist(&tree, &alloc, &target).unwrap();
        let per_tree: f64 = cycle.iter().map(|(s, p)| (s.len() - 1) as f64 * p).sum();
        assert!((per_tree - 14.0 / 15.0).abs() < 1e-12, "per-tree {per_tree}");

        // Tree-marginal route.
        let mut budget = EnumBudget::default();
        let marginal = exact_acceptance_length(
            &UniVerVerifier::default(),
            &target,
            &draft,
            &topo,
            &[],
            &mut budget,
        )
        .unwrap();
        assert!((marginal - 0.95).abs() < 1e-12, "marginal {marginal}");
        let report =
            check_conditional_optimality(1.0, &dist(&[0.2, 0.5, 0.3]), &dist(&[0.6, 0.3, 0.1]), 2)
                .unwrap();
        assert!(report.pass);
    }

    #[test]
    fn local_lossless_worked_example() {
        let report =
            check_local_lossless(1.0, &dist(&[0.2, 0.5, 0.3]), &dist(&[0.6, 0.3, 0.1]), 2)
                .unwrap();
        assert!(report.pass, "dev {}", report.max_abs_deviation);
    }

    #[test]
    fn local_lossless_trivial_at_zero_p_tilde() {
        let report =
            check_local_lossless(0.0, &dist(&[0.2, 0.5, 0.3]), &dist(&[0.6, 0.3, 0.1]), 2)
                .unwrap();
        assert!(report.pass);
    }

    #[test]
    fn conditional_optimality_matches_greedy_rate_at_one() {
        let mb = dist(&[0.2, 0.5, 0.3]);
        let ms = dist(&[0.6, 0.3, 0.1]);
        let report = check_conditional_optimality(1.0, &mb, &ms, 2).unwrap();
        assert!(report.pass);
        let rate = greedy_single_step_rate(&mb, &ms, 2).unwrap();
        assert!((rate - 0.95).abs() < 1e-12);
    }

    #[test]
    fn superiority_holds_on_random_small_configs() {
        for seed in 0..5 {
            let (target, draft) = misaligned_pair(100 + seed, 4);
            let topo = Topology::new(vec![2, 2]).unwrap();
            let mut budget = EnumBudget::default();
            let report =
                check_superiority(&target, &draft, &topo, &[], 1.0, &mut budget).unwrap();
            assert!(report.pass, "{:?}", report);
        }
    }

    #[test]
    fn scaled_superiority_trivial_at_zero_root() {
        let (target, draft) = misaligned_pair(7, 3);
        let topo = Topology::new(vec![2]).unwrap();
        let mut budget = EnumBudget::default();
        let report = check_superiority(&target, &draft, &topo, &[], 0.0, &mut budget).unwrap();
        assert!(report.pass);
        // A zero root accepts nothing.
        let e_mod = exact_acceptance_length(
            &UniVerVerifier::with_root_p_tilde(0.0),
            &target,
            &draft,
            &topo,
            &[],
            &mut budget,
        )
        .unwrap();
        assert!(e_mod.abs() < 1e-12);
    }

    #[test]
    fn monte_carlo_perfect_chain_has_zero_stderr() {
        let (target, draft) = aligned_pair(3);
        let topo = Topology::new(vec![1, 1, 1]).unwrap();
        let stats = monte_carlo_acceptance(
            &UniVerVerifier::default(),
            &target,
            &draft,
            &topo,
            &[],
            200,
            42,
            2,
        )
        .unwrap();
        assert_eq!(stats.mean, 3.0);
        assert_eq!(stats.stderr, 0.0);
        assert_eq!(stats.depth_tail, vec![200, 200, 200]);
        assert_eq!(stats.depth_rate(0), Some(1.0));
    }

    #[test]
    fn monte_carlo_is_worker_count_invariant() {
        let (target, draft) = misaligned_pair(8, 5);
        let topo = Topology::new(vec![2, 2]).unwrap();
        let one = monte_carlo_acceptance(
            &RrswVerifier, &target, &draft, &topo, &[], 500, 7, 1,
        )
        .unwrap();
        let eight = monte_carlo_acceptance(
            &RrswVerifier, &target, &draft, &topo, &[], 500, 7, 8,
        )
        .unwrap();
        assert_eq!(one, eight);
    }

    #[test]
    fn monte_carlo_agrees_with_exact_expectation() {
        let (target, draft) = misaligned_pair(8, 4);
        let topo = Topology::new(vec![2]).unwrap();
        let mut budget = EnumBudget::default();
        let exact = exact_acceptance_length(
            &GreedyVerifier,
            &target,
            &draft,
            &topo,
            &[],
            &mut budget,
        )
        .unwrap();
        let stats = monte_carlo_acceptance(
            &GreedyVerifier,
            &target,
            &draft,
            &topo,
            &[],
            100_000,
            11,
            4,
        )
        .unwrap();
        assert!(
            (stats.mean - exact).abs() <= 4.0 * stats.stderr.max(1e-6),
            "mc {} vs exact {exact} (se {})",
            stats.mean,
            stats.stderr
        );
    }

    #[test]
    fn rational_mode_reports_exactly_zero_deviation() {
        let (target, draft) = misaligned_pair(23, 3);
        let topo = Topology::new(vec![2]).unwrap();
        let mut budget = EnumBudget::default();
        for method in [
            Box::new(UniVerVerifier::default()) as Box<dyn Verifier>,
            Box::new(RrswVerifier),
            Box::new(GreedyVerifier),
        ] {
            let d = exact_output_dist_rational(
                method.as_ref(),
                &target,
                &draft,
                &topo,
                &[],
                &mut budget,
            )
            .unwrap();
            let reference: OutputDist<BigRational> =
                target_output_dist(&target, &[], 2, &mut budget).unwrap();
            let tv = d.total_variation(&reference);
            assert!(tv.is_zero(), "{}: tv {:?}", method.name(), tv.to_f64());
        }
    }
}
