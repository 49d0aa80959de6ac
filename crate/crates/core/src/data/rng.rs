//! Deterministic random streams.
//!
//! Every stream is a ChaCha8 generator keyed by the master seed and
//! positioned on its own ChaCha stream (`set_stream(stream_id)`), which gives
//! 2^64 non-overlapping sequences per seed. Work items own their stream, so
//! output never depends on how work is scheduled across threads.
//!
//! Normal variates use the Marsaglia polar method: draw `u, v` uniform on
//! `(-1, 1)` from the top 53 bits of `next_u64`, reject unless
//! `0 < s = u² + v² < 1`, then emit `u·f` and (cached) `v·f` with
//! `f = sqrt(-2 ln s / s)`. This algorithm is part of the reproducibility
//! contract; changing it changes every experiment output.

use nalgebra::DMatrix;
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids at or above this value are reserved for auxiliary purposes
/// (bootstrap resampling, initial weights, synthetic data); run indices stay
/// below it.
pub const AUX_STREAM_BASE: u64 = 1 << 63;

pub mod purpose {
    pub const BOOTSTRAP: u64 = super::AUX_STREAM_BASE;
    pub const INIT_WEIGHTS: u64 = super::AUX_STREAM_BASE + 1;
    pub const TEACHER_WEIGHTS: u64 = super::AUX_STREAM_BASE + 2;
    pub const SYNTHETIC_DATA: u64 = super::AUX_STREAM_BASE + 3;
    pub const MOMENT_CHECK: u64 = super::AUX_STREAM_BASE + 4;
    pub const RANDOM_STATES: u64 = super::AUX_STREAM_BASE + 5;
}

#[derive(Clone, Debug)]
pub struct RngStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl RngStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        rng.set_stream(stream_id);
        Self {
            master_seed,
            stream_id,
            rng,
            spare_normal: None,
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// A fresh stream under the same master seed.
    pub fn sibling(&self, stream_id: u64) -> Self {
        Self::new(self.master_seed, stream_id)
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection on 64-bit words (no modulo bias).
    pub fn index(&mut self, n: usize) -> usize {
        assert!(n > 0, "index range must be non-empty");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let v = self.rng.next_u64();
            if v <= zone {
                return (v % n) as usize;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        loop {
            let u = 2.0 * self.uniform() - 1.0;
            let v = 2.0 * self.uniform() - 1.0;
            let s = u * u + v * v;
            if s > 0.0 && s < 1.0 {
                let f = (-2.0 * s.ln() / s).sqrt();
                self.spare_normal = Some(v * f);
                return u * f;
            }
        }
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for v in out.iter_mut() {
            *v = self.standard_normal();
        }
    }

    /// Uniform size-`k` subset of `0..n` (partial Fisher–Yates), in draw order.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n, "subset larger than population");
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.index(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.rng.fill_bytes(dst)
    }
}

/// `count × dim` matrix of i.i.d. standard normals, filled row by row.
pub fn generate_gaussian_batch(stream: &mut RngStream, count: usize, dim: usize) -> DMatrix<f64> {
    assert!(count >= 1 && dim >= 1, "batch dimensions must be positive");
    let mut data = vec![0.0; count * dim];
    stream.fill_normal(&mut data);
    DMatrix::from_row_slice(count, dim, &data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_stream_is_reproducible() {
        let a = generate_gaussian_batch(&mut RngStream::new(7, 3), 5, 4);
        let b = generate_gaussian_batch(&mut RngStream::new(7, 3), 5, 4);
        assert_eq!(a, b);
        let c = generate_gaussian_batch(&mut RngStream::new(7, 4), 5, 4);
        assert_ne!(a, c);
    }

    #[test]
    fn normal_moments_at_one_million() {
        let n = 1_000_000;
        let x = generate_gaussian_batch(&mut RngStream::new(11, 0), n, 1);
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        assert!(mean.abs() < 4.0 / (n as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 1_000_000;
        let mut a = RngStream::new(11, 1);
        let mut b = RngStream::new(11, 2);
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..n {
            let x = a.standard_normal();
            let y = b.standard_normal();
            sa += x;
            sb += y;
            saa += x * x;
            sbb += y * y;
            sab += x * y;
        }
        let nf = n as f64;
        let cov = sab / nf - (sa / nf) * (sb / nf);
        let corr = cov / ((saa / nf - (sa / nf).powi(2)) * (sbb / nf - (sb / nf).powi(2))).sqrt();
        assert!(corr.abs() < 4.0 / nf.sqrt(), "corr {corr}");
    }

    #[test]
    fn subset_is_distinct_and_in_range() {
        let mut s = RngStream::new(1, 1);
        for _ in 0..100 {
            let mut sub = s.subset(10, 4);
            sub.sort();
            sub.dedup();
            assert_eq!(sub.len(), 4);
            assert!(sub.iter().all(|&i| i < 10));
        }
    }

    #[test]
    fn subset_is_uniform_over_pairs() {
        // 6 pairs of 4 items, each should appear with frequency 1/6.
        let mut s = RngStream::new(5, 9);
        let mut counts = [[0usize; 4]; 4];
        let trials = 60_000;
        for _ in 0..trials {
            let mut sub = s.subset(4, 2);
            sub.sort();
            counts[sub[0]][sub[1]] += 1;
        }
        for i in 0..4 {
            for j in (i + 1)..4 {
                let f = counts[i][j] as f64 / trials as f64;
                assert!((f - 1.0 / 6.0).abs() < 0.01, "pair ({i},{j}) freq {f}");
            }
        }
    }
}
