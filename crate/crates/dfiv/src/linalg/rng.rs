//! Seeded, splittable random streams.
//!
//! Each stream is a ChaCha20 block counter keyed by the seed with the
//! stream id selecting one of 2⁶⁴ independent nonces, so a stream's output
//! depends only on `(seed, stream_id)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::mat::Mat;

/// Single-owner random stream. Parallel work gets its own stream via
/// [`RngStream::split`].
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha20Rng,
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream with the same seed and a derived stream id. Independent
    /// of how many draws were taken from `self`.
    pub fn split(&self, child: u64) -> RngStream {
        let id = mix64(self.stream_id ^ mix64(child.wrapping_add(0x5851_F42D_4C95_7F2D)));
        RngStream::new(self.seed, id)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Draws an index with the given (normalized) probabilities.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding left u above the cumulative sum; take the last nonzero entry
        probs
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(probs.len() - 1)
    }

    /// `k` distinct indices from `0..n` (partial Fisher–Yates).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut idx: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            idx.swap(i, j);
        }
        idx.truncate(k);
        idx
    }

    pub fn gaussian_mat(&mut self, rows: usize, cols: usize, sd: f64) -> Mat {
        Mat::from_fn(rows, cols, |_, _| sd * self.gaussian())
    }
}

/// `n` draws from `N(mean, sd²)`. With `sd == 0` every entry equals `mean`.
pub fn sample_gaussian(rng: &mut RngStream, mean: f64, sd: f64, n: usize) -> Vec<f64> {
    assert!(sd >= 0.0, "standard deviation must be non-negative");
    (0..n).map(|_| mean + sd * rng.gaussian()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_gaussian() {
        let mut rng = RngStream::new(3, 0);
        assert_eq!(sample_gaussian(&mut rng, 7.0, 0.0, 3), vec![7.0; 3]);
    }

    #[test]
    fn same_stream_same_draws() {
        let a = sample_gaussian(&mut RngStream::new(42, 9), 0.0, 1.0, 64);
        let b = sample_gaussian(&mut RngStream::new(42, 9), 0.0, 1.0, 64);
        assert_eq!(a, b);
        let c = sample_gaussian(&mut RngStream::new(42, 10), 0.0, 1.0, 64);
        assert_ne!(a, c);
    }

    #[test]
    fn split_ignores_parent_position() {
        let parent = RngStream::new(5, 1);
        let mut advanced = parent.clone();
        advanced.uniform();
        let a = parent.split(3).uniform();
        let b = advanced.split(3).uniform();
        assert_eq!(a, b);
        assert_ne!(parent.split(3).stream_id(), parent.split(4).stream_id());
    }

    #[test]
    fn moments_at_large_n() {
        let xs = sample_gaussian(&mut RngStream::new(2024, 0), 0.0, 1.0, 100_000);
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((sd - 1.0).abs() < 0.02, "sd {sd}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let a = sample_gaussian(&mut RngStream::new(7, 0), 0.0, 1.0, 10_000);
        let b = sample_gaussian(&mut RngStream::new(7, 0).split(1), 0.0, 1.0, 10_000);
        let corr = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / 10_000.0;
        assert!(corr.abs() < 0.05, "corr {corr}");
    }

    #[test]
    fn sample_indices_are_distinct() {
        let mut rng = RngStream::new(1, 2);
        let mut idx = rng.sample_indices(50, 20);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 20);
    }
}
