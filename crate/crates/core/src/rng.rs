//! Deterministic random number generation.
//!
//! Everything stochastic in this crate draws from a single primitive: the
//! SplitMix64 generator run in counter mode. Output `k` of a stream with
//! seed `s` is `mix(s + (k+1) * GOLDEN)`, a pure function of `(s, k)`, so
//! streams can be replayed, forked, and resumed without hidden state.
//!
//! Independent streams are derived by hashing a root seed together with a
//! stream index: `derive(root, i) = mix(root ^ mix(i ^ GOLDEN))`. Training
//! code keys every random decision (batch order, sensor draws, noise,
//! flow-matching times) off its own derived stream, which is what makes
//! runs bit-reproducible and resumable.
//!
//! Gaussians use the Box-Muller transform rather than a rejection method
//! so that a given stream always yields the same variates on any platform.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer: a bijective avalanche mix on 64 bits.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z ^= z >> 30;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 27;
    z = z.wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    z
}

/// A deterministic 64-bit stream (SplitMix64 in counter mode).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    counter: u64,
    /// Second Box-Muller variate held for the next `next_gaussian` call.
    spare: Option<f64>,
}

impl Rng {
    /// Stream seeded directly with `seed`.
    pub fn from_seed(seed: u64) -> Self {
        Rng {
            seed,
            counter: 0,
            spare: None,
        }
    }

    /// Independent stream for substream `index` of root seed `root`.
    ///
    /// `derive(root, i) = from_seed(mix64(root ^ mix64(i ^ GOLDEN)))`.
    pub fn derive(root: u64, index: u64) -> Self {
        Rng::from_seed(mix64(root ^ mix64(index ^ GOLDEN)))
    }

    /// Two-level derivation for streams keyed by (tag, index), e.g. the
    /// noise stream of training iteration `k`.
    pub fn derive2(root: u64, tag: u64, index: u64) -> Self {
        let first = mix64(root ^ mix64(tag ^ GOLDEN));
        Rng::derive(first, index)
    }

    /// Output `counter` of the stream; advances the counter.
    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.seed.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in (0, 1]; never returns zero (safe under `ln`).
    #[inline]
    fn next_f64_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. `n` must be nonzero.
    ///
    /// Uses rejection on the top multiple of `n` to avoid modulo bias.
    pub fn next_index(&mut self, n: usize) -> usize {
        debug_assert!(n > 0, "next_index: n must be positive");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n);
        loop {
            let v = self.next_u64();
            if v < zone {
                return (v % n) as usize;
            }
        }
    }

    /// Standard normal variate via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.next_f64_open();
        let u2 = self.next_f64();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// `n` standard normal variates.
    pub fn gaussian_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_gaussian()).collect()
    }

    /// Normal variate truncated to `mean ± 2*std`, drawn by rejection.
    pub fn next_trunc_gaussian(&mut self, mean: f64, std: f64) -> f64 {
        loop {
            let z = self.next_gaussian();
            if z.abs() <= 2.0 {
                return mean + std * z;
            }
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.next_index(i + 1);
            items.swap(i, j);
        }
    }

    /// `k` distinct indices from `[0, n)`, ascending. `k <= n` required.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        debug_assert!(k <= n, "sample_indices: k must not exceed n");
        let mut all: Vec<usize> = (0..n).collect();
        // Partial Fisher-Yates: after k swaps the first k slots are a
        // uniform sample without replacement.
        for i in 0..k {
            let j = i + self.next_index(n - i);
            all.swap(i, j);
        }
        let mut picked = all[..k].to_vec();
        picked.sort_unstable();
        picked
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_replayable() {
        let mut a = Rng::from_seed(42);
        let mut b = Rng::from_seed(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ_from_root_and_each_other() {
        let mut root = Rng::from_seed(7);
        let mut s0 = Rng::derive(7, 0);
        let mut s1 = Rng::derive(7, 1);
        let (a, b, c) = (root.next_u64(), s0.next_u64(), s1.next_u64());
        assert_ne!(a, b);
        assert_ne!(b, c);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_is_in_unit_interval_and_roughly_centered() {
        let mut rng = Rng::from_seed(3);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let u = rng.next_f64();
            assert!((0.0..1.0).contains(&u));
            sum += u;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.01, "mean {mean} far from 0.5");
    }

    #[test]
    fn gaussian_moments_match_standard_normal() {
        let mut rng = Rng::from_seed(11);
        let n = 100_000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let z = rng.next_gaussian();
            sum += z;
            sumsq += z * z;
        }
        let mean = sum / n as f64;
        let var = sumsq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn next_index_is_unbiased_over_small_range() {
        let mut rng = Rng::from_seed(5);
        let mut counts = [0usize; 3];
        let n = 30_000;
        for _ in 0..n {
            counts[rng.next_index(3)] += 1;
        }
        for &c in &counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 1.0 / 3.0).abs() < 0.02, "bucket fraction {frac}");
        }
    }

    #[test]
    fn truncated_gaussian_stays_within_two_sigma() {
        let mut rng = Rng::from_seed(9);
        for _ in 0..10_000 {
            let x = rng.next_trunc_gaussian(0.5, 0.02);
            assert!((x - 0.5).abs() <= 0.04 + 1e-12);
        }
    }

    #[test]
    fn sample_indices_are_distinct_sorted_and_in_range() {
        let mut rng = Rng::from_seed(13);
        let idx = rng.sample_indices(10, 4);
        assert_eq!(idx.len(), 4);
        for w in idx.windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(idx.iter().all(|&i| i < 10));
    }
}
