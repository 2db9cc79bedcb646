//! Seeded, splittable random number generation.
//!
//! Backed by ChaCha8 (`rand_chacha`), whose output stream is fixed by the seed and
//! identical on every platform. Children created with [`Rng::split`] are seeded from
//! the parent stream, so a run's randomness is a pure function of its root seed.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent child generator; advances `self`.
    pub fn split(&mut self) -> Self {
        Self::seed(self.inner.next_u64())
    }

    /// Child generator keyed by `index`, without advancing `self`.
    pub fn fork(&self, index: u64) -> Self {
        let mut probe = self.inner.clone();
        probe.set_stream(index.wrapping_add(1));
        Self::seed(probe.next_u64())
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        Uniform::new(0, n).sample(&mut self.inner)
    }

    /// Standard normal via Box-Muller.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// `amount` distinct indices from `0..len`, uniformly without replacement.
    pub fn sample_indices(&mut self, len: usize, amount: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, len, amount).into_vec()
    }
}
