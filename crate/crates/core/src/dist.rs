//! Finite-vocabulary probability primitives shared by every other module.
//!
//! A [`Dist`] is an immutable probability vector over token ids
//! `0..K-1`. All operations are pure; construction enforces the numerical
//! hygiene rules (tiny negative entries clamp to zero, small mass drift
//! renormalizes, anything worse is an error).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::Token;

/// Vocabulary of `size` tokens with ids `0..size-1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size == 0 {
            return Err(Error::BadConfig("vocab size must be at least 1".into()));
        }
        Ok(Self { size })
    }

    pub fn check_token(&self, token: Token) -> Result<()> {
        if (token as usize) < self.size {
            Ok(())
        } else {
            Err(Error::TokenOutOfRange {
                token,
                vocab: self.size,
            })
        }
    }
}

/// Probability vector over a finite vocabulary, generic in the scalar so
/// the oracle can run the same formulas in exact rational arithmetic.
#[derive(Debug, Clone, PartialEq)]
pub struct DistOf<P> {
    probs: Vec<P>,
}

/// The default double-precision distribution.
pub type Dist = DistOf<f64>;

impl Dist {
    /// Validate and construct. Entries in `[-1e-12, 0)` clamp to 0;
    /// `|sum - 1|` up to 1e-12 is accepted as-is, up to 1e-6 renormalizes,
    /// beyond that is a [`Error::BadMass`].
    pub fn new(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::ZeroMass);
        }
        for p in probs.iter_mut() {
            if *p < 0.0 {
                if *p >= -1e-12 {
                    *p = 0.0;
                } else {
                    return Err(Error::NegativeWeight(*p));
                }
            }
        }
        let sum: f64 = probs.iter().sum();
        let drift = (sum - 1.0).abs();
        if drift > 1e-12 {
            if drift > 1e-6 {
                return Err(Error::BadMass(sum));
            }
            for p in probs.iter_mut() {
                *p /= sum;
            }
        }
        Ok(Self { probs })
    }

    /// Point mass on `token`.
    pub fn point_mass(vocab: Vocab, token: Token) -> Result<Self> {
        vocab.check_token(token)?;
        let mut probs = vec![0.0; vocab.size];
        probs[token as usize] = 1.0;
        Ok(Self { probs })
    }

    /// Inverse-CDF sample in token-id order: the smallest token whose
    /// cumulative probability exceeds `u`.
    pub fn sample(&self, u: f64) -> Token {
        debug_assert!((0.0..1.0).contains(&u));
        let mut cum = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            cum += p;
            if u < cum {
                return i as Token;
            }
        }
        // Rounding can leave the final cumulative a hair below 1; fall back
        // to the last positive-mass token.
        self.probs
            .iter()
            .rposition(|&p| p > 0.0)
            .expect("distribution has positive mass") as Token
    }

    /// Scalar copy of this distribution. The f64 instantiation is
    /// bit-identical; the rational one renormalizes by the exact sum so
    /// downstream identities hold with zero deviation.
    pub fn to_scalar<P: Scalar>(&self) -> DistOf<P> {
        DistOf {
            probs: P::embed_probs(self.probs.iter().map(|&p| P::from_f64(p)).collect()),
        }
    }
}

impl<P: Scalar> DistOf<P> {
    /// Construct without renormalization; callers guarantee the entries are
    /// a probability vector (used by the exact oracle where arithmetic is
    /// closed-form).
    pub fn from_probs_unchecked(probs: Vec<P>) -> Self {
        Self { probs }
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    pub fn vocab(&self) -> Vocab {
        Vocab {
            size: self.probs.len(),
        }
    }

    pub fn prob(&self, token: Token) -> P {
        self.probs[token as usize].clone()
    }

    pub fn probs(&self) -> &[P] {
        &self.probs
    }

    /// Tokens with strictly positive probability, derived fresh on each
    /// call (never cached).
    pub fn support(&self) -> impl Iterator<Item = Token> + '_ {
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| !p.is_zero())
            .map(|(i, _)| i as Token)
    }

    pub fn support_size(&self) -> usize {
        self.probs.iter().filter(|p| !p.is_zero()).count()
    }

    pub fn mass(&self) -> P {
        self.probs
            .iter()
            .fold(P::zero(), |acc, p| acc + p.clone())
    }
}

/// Normalize non-negative weights into a distribution.
///
/// Entries in `[-1e-12, 0)` clamp to zero; a more negative entry or an
/// all-zero vector is an error.
pub fn normalize(weights: &[f64]) -> Result<Dist> {
    if weights.is_empty() {
        return Err(Error::ZeroMass);
    }
    let mut probs = Vec::with_capacity(weights.len());
    for &w in weights {
        if w < 0.0 {
            if w < -1e-12 {
                return Err(Error::NegativeWeight(w));
            }
            probs.push(0.0);
        } else {
            probs.push(w);
        }
    }
    let sum: f64 = probs.iter().sum();
    if sum <= 0.0 {
        return Err(Error::ZeroMass);
    }
    for p in probs.iter_mut() {
        *p /= sum;
    }
    Ok(Dist { probs })
}

/// Generic renormalization used by the exact oracle.
pub fn normalize_scalar<P: Scalar>(weights: &[P]) -> Result<DistOf<P>> {
    let sum = weights
        .iter()
        .fold(P::zero(), |acc, w| acc + w.clone());
    if sum.is_zero() || sum < P::zero() {
        return Err(Error::ZeroMass);
    }
    Ok(DistOf {
        probs: weights.iter().map(|w| w.clone() / sum.clone()).collect(),
    })
}

/// Residual distribution: zero out `excluded` tokens and renormalize the
/// remaining mass proportionally.
pub fn residual_without<P: Scalar>(d: &DistOf<P>, excluded: &[Token]) -> Result<DistOf<P>> {
    let mut probs = d.probs.clone();
    for &t in excluded {
        if (t as usize) < probs.len() {
            probs[t as usize] = P::zero();
        }
    }
    let rem = probs
        .iter()
        .fold(P::zero(), |acc, p| acc + p.clone());
    if rem.is_zero() {
        return Err(Error::ZeroMass);
    }
    for p in probs.iter_mut() {
        *p = p.clone() / rem.clone();
    }
    Ok(DistOf { probs })
}

/// `sum_x min(p(x), q(x))`: the maximum achievable single-draft overlap.
pub fn overlap<P: Scalar>(p: &DistOf<P>, q: &DistOf<P>) -> Result<P> {
    if p.vocab_size() != q.vocab_size() {
        return Err(Error::VocabMismatch(p.vocab_size(), q.vocab_size()));
    }
    Ok(p.probs
        .iter()
        .zip(&q.probs)
        .fold(P::zero(), |acc, (a, b)| {
            acc + P::min_of(a.clone(), b.clone())
        }))
}

/// The `k` highest-probability tokens, descending, ties broken by lowest
/// token id. Only positive-mass tokens are returned, so the list may be
/// shorter than `k`.
pub fn top_k<P: Scalar>(d: &DistOf<P>, k: usize) -> Vec<Token> {
    let mut order: Vec<usize> = (0..d.probs.len())
        .filter(|&i| !d.probs[i].is_zero())
        .collect();
    order.sort_by(|&a, &b| {
        d.probs[b]
            .partial_cmp(&d.probs[a])
            .expect("probabilities are comparable")
            .then(a.cmp(&b))
    });
    order.truncate(k);
    order.into_iter().map(|i| i as Token).collect()
}

/// Power-renormalization temperature: entry `i` becomes proportional to
/// `d(i)^(1/T)`. `T = 1` is the identity; `T -> 0` converges to a point
/// mass on the argmax (lowest id on ties). Computed in log space so
/// extreme temperatures stay finite.
pub fn apply_temperature(d: &Dist, temperature: f64) -> Result<Dist> {
    if temperature <= 0.0 {
        return Err(Error::BadConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if temperature == 1.0 {
        return Ok(d.clone());
    }
    let inv = 1.0 / temperature;
    let scaled: Vec<f64> = d
        .probs
        .iter()
        .map(|&p| if p > 0.0 { p.ln() * inv } else { f64::NEG_INFINITY })
        .collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled
        .iter()
        .map(|&s| {
            if s == f64::NEG_INFINITY {
                0.0
            } else {
                (s - max).exp()
            }
        })
        .collect();
    normalize(&weights)
}
