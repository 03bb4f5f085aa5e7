//! Synthetic target/draft conditional-model pairs with controllable
//! alignment.
//!
//! The target is a seeded-random or order-1 Markov model; the draft blends
//! the untempered target with an independent noise model (`drift` is the
//! mixing weight) and both sides are temperature-scaled once, so `drift = 0`
//! makes the draft equal the target pointwise. Every evaluation is a pure
//! function of `(family, params, prefix)`.

use serde::{Deserialize, Serialize};

use crate::dist::{apply_temperature, normalize, Dist, Vocab};
use crate::error::{Error, Result};
use crate::rng::{mix2, stable_hash, UniformStream};
use crate::Token;

/// Target-model family selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetFamily {
    /// Fresh full-support distribution per prefix, derived from a stable
    /// prefix hash.
    SeededRandom,
    /// Order-1 Markov chain: the distribution depends only on the last
    /// accepted token, which keeps exact enumeration cheap.
    Markov1,
}

/// Configuration for one target/draft pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelPairConfig {
    pub vocab: usize,
    pub family: TargetFamily,
    pub seed: u64,
    /// Drift of the draft away from the target: 0 = identical, 1 = independent.
    pub drift: f64,
    pub temperature: f64,
    /// Concentration of the weight construction; larger is flatter.
    pub concentration: f64,
}

impl ModelPairConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 {
            return Err(Error::BadConfig(format!(
                "vocab must be at least 2, got {}",
                self.vocab
            )));
        }
        if !(0.0..=1.0).contains(&self.drift) {
            return Err(Error::BadConfig(format!(
                "drift must lie in [0, 1], got {}",
                self.drift
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::BadConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if !(self.concentration > 0.0) {
            return Err(Error::BadConfig(format!(
                "concentration must be positive, got {}",
                self.concentration
            )));
        }
        Ok(())
    }
}

/// A conditional token model: maps an accepted prefix to a distribution
/// over the next token.
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionalModel {
    SeededRandom {
        vocab: Vocab,
        seed: u64,
        concentration: f64,
        temperature: f64,
    },
    Markov1 {
        vocab: Vocab,
        seed: u64,
        concentration: f64,
        temperature: f64,
    },
    /// `(1 - drift) * base + drift * noise`, then temperature-scaled.
    MixtureOfTarget {
        base: Box<ConditionalModel>,
        noise: Box<ConditionalModel>,
        drift: f64,
        temperature: f64,
    },
    /// Context-free constant model; handy for worked examples and
    /// calibration runs.
    Fixed { dist: Dist },
}

/// Full-support weights from a prefix hash: `exp(gaussian / concentration)`.
fn hashed_weights(hash: u64, vocab: Vocab, concentration: f64) -> Vec<f64> {
    let mut stream = UniformStream::new(hash);
    (0..vocab.size)
        .map(|_| (stream.next_gaussian() / concentration).exp())
        .collect()
}

impl ConditionalModel {
    pub fn vocab(&self) -> Vocab {
        match self {
            Self::SeededRandom { vocab, .. } | Self::Markov1 { vocab, .. } => *vocab,
            Self::MixtureOfTarget { base, .. } => base.vocab(),
            Self::Fixed { dist } => dist.vocab(),
        }
    }

    /// Evaluate the next-token distribution for `prefix`.
    pub fn eval(&self, prefix: &[Token]) -> Result<Dist> {
        let vocab = self.vocab();
        for &t in prefix {
            vocab.check_token(t)?;
        }
        match self {
            Self::SeededRandom {
                seed,
                concentration,
                temperature,
                ..
            } => {
                let h = stable_hash(*seed, prefix);
                let d = normalize(&hashed_weights(h, vocab, *concentration))?;
                apply_temperature(&d, *temperature)
            }
            Self::Markov1 {
                seed,
                concentration,
                temperature,
                ..
            } => {
                // Row of a seeded row-stochastic matrix indexed by the last
                // token; the empty prefix uses a seeded initial row.
                let h = match prefix.last() {
                    Some(&t) => stable_hash(*seed, &[t]),
                    None => stable_hash(*seed, &[]),
                };
                let d = normalize(&hashed_weights(h, vocab, *concentration))?;
                apply_temperature(&d, *temperature)
            }
            Self::MixtureOfTarget {
                base,
                noise,
                drift,
                temperature,
            } => {
                let b = base.eval(prefix)?;
                if *drift == 0.0 {
                    return apply_temperature(&b, *temperature);
                }
                let n = noise.eval(prefix)?;
                let mixed: Vec<f64> = b
                    .probs()
                    .iter()
                    .zip(n.probs())
                    .map(|(&pb, &pn)| (1.0 - drift) * pb + drift * pn)
                    .collect();
                apply_temperature(&normalize(&mixed)?, *temperature)
            }
            Self::Fixed { dist } => Ok(dist.clone()),
        }
    }
}

/// Build the `(target, draft)` pair for a config. Deterministic in the seed.
pub fn make_pair(cfg: &ModelPairConfig) -> Result<(ConditionalModel, ConditionalModel)> {
    cfg.validate()?;
    let vocab = Vocab::new(cfg.vocab)?;
    let target_seed = mix2(cfg.seed, 1);
    let noise_seed = mix2(cfg.seed, 2);
    let base = match cfg.family {
        TargetFamily::SeededRandom => ConditionalModel::SeededRandom {
            vocab,
            seed: target_seed,
            concentration: cfg.concentration,
            temperature: 1.0,
        },
        TargetFamily::Markov1 => ConditionalModel::Markov1 {
            vocab,
            seed: target_seed,
            concentration: cfg.concentration,
            temperature: 1.0,
        },
    };
    let mut target = base.clone();
    match &mut target {
        ConditionalModel::SeededRandom { temperature, .. }
        | ConditionalModel::Markov1 { temperature, .. } => *temperature = cfg.temperature,
        _ => unreachable!("pair targets are hash-derived families"),
    }
    // The noise shares the target's family so a Markov pair stays order-1
    // (that family exists to keep exact enumeration cheap).
    let noise = match cfg.family {
        TargetFamily::SeededRandom => ConditionalModel::SeededRandom {
            vocab,
            seed: noise_seed,
            concentration: cfg.concentration,
            temperature: 1.0,
        },
        TargetFamily::Markov1 => ConditionalModel::Markov1 {
            vocab,
            seed: noise_seed,
            concentration: cfg.concentration,
            temperature: 1.0,
        },
    };
    let draft = ConditionalModel::MixtureOfTarget {
        base: Box::new(base),
        noise: Box::new(noise),
        drift: cfg.drift,
        temperature: cfg.temperature,
    };
    Ok((target, draft))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dist::overlap;

    fn cfg(drift: f64) -> ModelPairConfig {
        ModelPairConfig {
            vocab: 8,
            family: TargetFamily::SeededRandom,
            seed: 11,
            drift,
            temperature: 1.0,
            concentration: 1.0,
        }
    }

    fn random_prefix(rng: &mut UniformStream, vocab: usize, len: usize) -> Vec<Token> {
        (0..len)
            .map(|_| (rng.next_u64() % vocab as u64) as Token)
            .collect()
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = cfg(0.0);
        c.vocab = 1;
        assert!(matches!(make_pair(&c), Err(Error::BadConfig(_))));
        let mut c = cfg(0.0);
        c.drift = 1.5;
        assert!(matches!(make_pair(&c), Err(Error::BadConfig(_))));
        let mut c = cfg(0.0);
        c.temperature = 0.0;
        assert!(matches!(make_pair(&c), Err(Error::BadConfig(_))));
    }

    #[test]
    fn zero_drift_makes_draft_equal_target_pointwise() {
        let (target, draft) = make_pair(&cfg(0.0)).unwrap();
        let mut rng = UniformStream::new(3);
        for len in 0..6 {
            let prefix = random_prefix(&mut rng, 8, len);
            assert_eq!(target.eval(&prefix).unwrap(), draft.eval(&prefix).unwrap());
        }
    }

    #[test]
    fn zero_drift_holds_under_temperature() {
        let mut c = cfg(0.0);
        c.temperature = 0.4;
        let (target, draft) = make_pair(&c).unwrap();
        let prefix = [3, 1, 4];
        assert_eq!(target.eval(&prefix).unwrap(), draft.eval(&prefix).unwrap());
    }

    #[test]
    fn same_config_twice_is_bit_identical() {
        let (t1, d1) = make_pair(&cfg(0.3)).unwrap();
        let (t2, d2) = make_pair(&cfg(0.3)).unwrap();
        let prefix = [0, 5, 2];
        assert_eq!(t1.eval(&prefix).unwrap(), t2.eval(&prefix).unwrap());
        assert_eq!(d1.eval(&prefix).unwrap(), d2.eval(&prefix).unwrap());
    }

    #[test]
    fn markov1_depends_only_on_last_token() {
        let mut c = cfg(0.2);
        c.family = TargetFamily::Markov1;
        let (target, draft) = make_pair(&c).unwrap();
        assert_eq!(target.eval(&[0, 3]).unwrap(), target.eval(&[5, 3]).unwrap());
        assert_eq!(draft.eval(&[0, 3]).unwrap(), draft.eval(&[5, 3]).unwrap());
        assert_ne!(target.eval(&[]).unwrap(), target.eval(&[3]).unwrap());
    }

    #[test]
    fn seeded_random_prefixes_rarely_collide() {
        // 1e4 distinct prefixes must give 1e4 distinct distributions.
        let (target, _) = make_pair(&cfg(0.0)).unwrap();
        let mut seen = std::collections::HashSet::new();
        for i in 0..10_000u64 {
            // Base-8 digits of i: distinct prefixes by construction.
            let prefix: Vec<Token> = (0..5).map(|d| ((i >> (3 * d)) & 7) as Token).collect();
            let d = target.eval(&prefix).unwrap();
            let bits: Vec<u64> = d.probs().iter().map(|p| p.to_bits()).collect();
            seen.insert(bits);
        }
        assert_eq!(seen.len(), 10_000, "hash collision detected");
    }

    #[test]
    fn evaluations_are_valid_distributions() {
        for family in [TargetFamily::SeededRandom, TargetFamily::Markov1] {
            let mut c = cfg(0.5);
            c.family = family;
            c.temperature = 0.7;
            let (target, draft) = make_pair(&c).unwrap();
            let mut rng = UniformStream::new(8);
            for len in 0..5 {
                let prefix = random_prefix(&mut rng, 8, len);
                for m in [&target, &draft] {
                    let d = m.eval(&prefix).unwrap();
                    assert!((d.mass() - 1.0).abs() <= 1e-9);
                }
            }
        }
    }

    #[test]
    fn eval_rejects_out_of_range_tokens() {
        let (target, _) = make_pair(&cfg(0.0)).unwrap();
        assert!(matches!(
            target.eval(&[99]),
            Err(Error::TokenOutOfRange { token: 99, .. })
        ));
    }

    #[test]
    fn mean_overlap_is_non_increasing_in_drift() {
        // Monte Carlo over shared random prefixes; the mixture construction
        // shares base and noise across drifts so the trend is smooth.
        let prefixes: Vec<Vec<Token>> = {
            let mut rng = UniformStream::new(55);
            (0..200)
                .map(|i| random_prefix(&mut rng, 8, (i % 5) as usize))
                .collect()
        };
        let mean_overlap = |drift: f64| -> f64 {
            let (target, draft) = make_pair(&cfg(drift)).unwrap();
            prefixes
                .iter()
                .map(|p| {
                    overlap(&target.eval(p).unwrap(), &draft.eval(p).unwrap()).unwrap()
                })
                .sum::<f64>()
                / prefixes.len() as f64
        };
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let means: Vec<f64> = grid.iter().map(|&e| mean_overlap(e)).collect();
        for w in means.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-9,
                "mean overlap increased along drift grid: {means:?}"
            );
        }
        assert!((means[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_drift_draft_is_decorrelated_from_target() {
        // Pearson correlation of per-token probabilities across prefixes,
        // pooled over the vocabulary; at drift = 1 the draft only sees the
        // independent noise model.
        let (target, draft) = make_pair(&cfg(1.0)).unwrap();
        let mut rng = UniformStream::new(91);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..1_000 {
            let prefix = random_prefix(&mut rng, 8, 1 + (i % 4));
            let t = target.eval(&prefix).unwrap();
            let d = draft.eval(&prefix).unwrap();
            xs.extend_from_slice(t.probs());
            ys.extend_from_slice(d.probs());
        }
        let n = xs.len() as f64;
        let mx = xs.iter().sum::<f64>() / n;
        let my = ys.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for (x, y) in xs.iter().zip(&ys) {
            cov += (x - mx) * (y - my);
            vx += (x - mx) * (x - mx);
            vy += (y - my) * (y - my);
        }
        let corr = cov / (vx.sqrt() * vy.sqrt());
        // ~4 standard errors at this sample size.
        assert!(corr.abs() < 0.05, "correlation {corr} too large for drift 1");
    }
}
