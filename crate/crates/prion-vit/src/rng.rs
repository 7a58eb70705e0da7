//! Deterministic random number streams.
//!
//! Every stochastic step in the crate (initialization, shuffling, augmentation,
//! speckle synthesis) draws from a [`Rng`] so that a 64-bit seed fully
//! determines the run. Substreams are derived by mixing labels into the ChaCha
//! stream id, which keeps draws independent of call order across components.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

/// Seeded, platform-independent generator (ChaCha8 keyed by a 64-bit seed).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
    stream: u64,
}

/// SplitMix64 finalizer; used to spread label words into stream ids.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn from_seed(seed: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(0);
        Self {
            inner,
            seed,
            stream: 0,
        }
    }

    /// Independent substream of the same seed, keyed by arbitrary label words.
    /// `derive(&[a, b])` is stable across platforms and call sites.
    pub fn derive(&self, labels: &[u64]) -> Self {
        let mut acc = mix(self.stream ^ 0xa076_1d64_78bd_642f);
        for &w in labels {
            acc = mix(acc ^ w);
        }
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(acc);
        Self {
            inner,
            seed: self.seed,
            stream: acc,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    /// Uniform in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        if lo == hi {
            return lo;
        }
        Uniform::new(lo, hi).sample(&mut self.inner)
    }

    /// Uniform integer in [0, n).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index() needs a non-empty range");
        self.inner.gen_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        if std_dev == 0.0 {
            return mean;
        }
        Normal::new(mean, std_dev)
            .expect("finite normal parameters")
            .sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices out of `0..n`, ascending. Used by the gradient
    /// checker to subsample coordinates of large tensors.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        if k >= n {
            return (0..n).collect();
        }
        // Floyd's algorithm.
        let mut chosen = std::collections::BTreeSet::new();
        for j in (n - k)..n {
            let t = self.index(j + 1);
            if !chosen.insert(t) {
                chosen.insert(j);
            }
        }
        chosen.into_iter().collect()
    }

    /// Serializable position: (stream id, word position).
    pub fn state(&self) -> (u64, u128) {
        (self.stream, self.inner.get_word_pos())
    }

    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        inner.set_word_pos(word_pos);
        Self {
            inner,
            seed,
            stream,
        }
    }
}
