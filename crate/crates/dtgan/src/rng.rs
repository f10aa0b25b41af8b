//! Seeded random number generation with exactly serializable state.
//!
//! All stochasticity in the crate flows through [`Rng`], a ChaCha8 stream
//! wrapped with fixed transforms (Box-Muller for normals, 53-bit uniforms).
//! The state serializes as (seed, word position), which is what makes
//! checkpoint resume bit-exact.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn seed_from(seed: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        Rng {
            inner: ChaCha8Rng::from_seed(key),
            seed,
        }
    }

    /// Derive an independent stream, e.g. per-purpose ("init", "data") or
    /// per-sample. Uses a splitmix-style hash so derived seeds don't collide
    /// for nearby inputs.
    pub fn derive(master: u64, tag: u64) -> Self {
        Rng::seed_from(mix64(master ^ mix64(tag)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (lo, hi].
    pub fn next_uniform(&mut self, lo: f64, hi: f64) -> f64 {
        hi - (hi - lo) * self.next_f64()
    }

    /// Standard normal via Box-Muller. Consumes exactly two raw draws so the
    /// word position advances deterministically (the sine branch is unused).
    pub fn next_normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64(); // (0, 1]
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in [0, n).
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Serializable state: (original seed, stream word position).
    pub fn state(&self) -> (u64, u128) {
        (self.seed, self.inner.get_word_pos())
    }

    pub fn restore(seed: u64, word_pos: u128) -> Self {
        let mut rng = Rng::seed_from(seed);
        rng.inner.set_word_pos(word_pos);
        rng
    }
}

/// splitmix64 finalizer; good avalanche for seed derivation.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
