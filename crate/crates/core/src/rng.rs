//! Seeded random streams.
//!
//! Every stream is a ChaCha8 generator keyed by a 64-bit seed. ChaCha8 output
//! is specified bit-for-bit, so a seed reproduces the same draws on every
//! platform. Child streams are derived with [`RngStream::fork`], which mixes
//! the parent seed with a label through SplitMix64; no stream ever reads the
//! clock or OS entropy.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

// FNV-1a, stable across platforms and compiler versions.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child stream; depends only on this stream's seed and the label,
    /// never on how many draws the parent has made.
    pub fn fork(&self, label: &str) -> Self {
        Self::new(splitmix64(self.seed ^ splitmix64(label_hash(label))))
    }

    /// Child stream keyed by an integer, e.g. a step or instance index.
    pub fn fork_index(&self, label: &str, index: u64) -> Self {
        Self::new(splitmix64(
            self.seed ^ splitmix64(label_hash(label) ^ splitmix64(index)),
        ))
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform integer in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.rng);
    }

    /// `k` distinct elements of `pool`, uniformly without replacement.
    pub fn choose_distinct(&mut self, pool: &[usize], k: usize) -> Vec<usize> {
        pool.choose_multiple(&mut self.rng, k).copied().collect()
    }

    pub fn normal_tensor(&mut self, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal()).collect();
        Tensor::new(shape, data).expect("length matches shape")
    }

    pub fn uniform_tensor(&mut self, shape: &[usize], lo: f64, hi: f64) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.uniform_range(lo, hi)).collect();
        Tensor::new(shape, data).expect("length matches shape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn equal_seeds_equal_sequences() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        let xs: Vec<u64> = (0..64).map(|_| a.normal().to_bits()).collect();
        let ys: Vec<u64> = (0..64).map(|_| b.normal().to_bits()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn fork_ignores_parent_position() {
        let a = RngStream::new(7);
        let mut b = RngStream::new(7);
        b.normal();
        assert_eq!(a.fork("x").normal(), b.fork("x").normal());
        assert_ne!(a.fork("x").seed(), a.fork("y").seed());
        assert_ne!(a.fork_index("s", 0).seed(), a.fork_index("s", 1).seed());
    }

    #[test]
    fn pinned_first_draws() {
        // Frozen so that a dependency bump that changes the stream is noticed.
        assert_eq!(RngStream::new(0).uniform().to_bits(), 0x3fe6b0beecf4f347);
        assert_eq!(RngStream::new(0).normal().to_bits(), 0x3fe666142e2cf064);
    }
}
