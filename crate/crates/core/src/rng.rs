//! Deterministic randomness: a splitmix64 uniform stream and the stable
//! 64-bit prefix hash the synthetic models are built on.
//!
//! Everything here is integer arithmetic on fixed constants, so streams and
//! hashes reproduce bit-for-bit across platforms. Callers that need
//! randomness receive a seeded [`UniformStream`]; no module holds hidden
//! RNG state.

use crate::Token;

/// splitmix64 state update, returning the next 64-bit output.
#[inline]
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// One-shot mix of two words (used for seed and stream derivation).
#[inline]
pub fn mix2(a: u64, b: u64) -> u64 {
    let mut s = a ^ b.wrapping_mul(0xff51_afd7_ed55_8ccd);
    splitmix64(&mut s)
}

/// Stable hash of `(seed, tokens.len(), tokens...)`.
///
/// This is the documented prefix hash: absorb the seed, then the length,
/// then each token in order, one splitmix64 round per word.
pub fn stable_hash(seed: u64, tokens: &[Token]) -> u64 {
    let mut state = seed;
    let mut h = splitmix64(&mut state);
    state ^= tokens.len() as u64;
    h ^= splitmix64(&mut state);
    for &t in tokens {
        state ^= u64::from(t).wrapping_mul(0xd6e8_feb8_6659_fd93);
        h ^= splitmix64(&mut state);
    }
    h
}

/// A seeded stream of uniforms on `[0, 1)`.
///
/// Draw order is part of every consumer's contract (tree growth draws in
/// breadth-first node order, the decision phase in post-order position),
/// so two runs with the same seed replay identically.
#[derive(Debug, Clone)]
pub struct UniformStream {
    state: u64,
}

impl UniformStream {
    pub fn new(seed: u64) -> Self {
        Self {
            state: mix2(seed, 0x5bf0_3635),
        }
    }

    /// Independent substream for `(master, index)`; used for per-trial
    /// streams so results do not depend on worker scheduling.
    pub fn derive(master: u64, index: u64) -> Self {
        Self::new(mix2(master, index.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ 0xa076_1d64_78bd_642f))
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        splitmix64(&mut self.state)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    #[inline]
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform on `(0, 1]`; used where a logarithm must stay finite.
    #[inline]
    pub fn next_uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = self.next_uniform_open();
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }
}
