//! Synthetic relations: uniform, Zipf, and R-MAT edge lists.
//!
//! All generators draw from ChaCha8 seeded with the little-endian bytes of
//! the `u64` seed followed by zeros. A value below `n` is `(r·n) >> 64` for a
//! raw 64-bit draw `r`; a unit double is `(r >> 11)·2⁻⁵³`. Tuples draw the
//! left value first, then the right one. Outputs are therefore bit-identical
//! for a given seed on every platform.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relation::{Column, RawTable};

pub fn rng(seed: u64) -> ChaCha8Rng {
    let mut bytes = [0u8; 32];
    bytes[..8].copy_from_slice(&seed.to_le_bytes());
    ChaCha8Rng::from_seed(bytes)
}

/// Uniform integer in `[0, n)`.
#[inline]
pub fn below(rng: &mut impl RngCore, n: u64) -> u64 {
    ((rng.next_u64() as u128 * n as u128) >> 64) as u64
}

/// Uniform double in `[0, 1)`.
#[inline]
pub fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// `n_tuples` pairs with both values uniform in `[0, n_max)`.
pub fn gen_uniform(n_tuples: usize, n_max: u64, seed: u64) -> Result<RawTable> {
    if n_max == 0 {
        return Err(Error::Param("n_max must be at least 1".into()));
    }
    let mut r = rng(seed);
    let mut left = Vec::with_capacity(n_tuples);
    let mut right = Vec::with_capacity(n_tuples);
    for _ in 0..n_tuples {
        left.push(below(&mut r, n_max));
        right.push(below(&mut r, n_max));
    }
    RawTable::new(Column::Int(left), Column::Int(right))
}

/// Samples ranks `1..=n` with probability proportional to `r^-alpha` by
/// binary search over the cumulative weights.
#[derive(Debug, Clone)]
pub struct ZipfSampler {
    cdf: Vec<f64>,
}

impl ZipfSampler {
    pub fn new(n: u64, alpha: f64) -> Result<Self> {
        if n == 0 || !(alpha >= 0.0) || !alpha.is_finite() {
            return Err(Error::Param(format!(
                "zipf needs n >= 1 and finite alpha >= 0, got n={n}, alpha={alpha}"
            )));
        }
        let mut cdf = Vec::with_capacity(n as usize);
        let mut acc = 0.0;
        for r in 1..=n {
            acc += (r as f64).powf(-alpha);
            cdf.push(acc);
        }
        Ok(ZipfSampler { cdf })
    }

    pub fn pmf(&self, rank: u64) -> f64 {
        let i = rank as usize - 1;
        let lo = if i == 0 { 0.0 } else { self.cdf[i - 1] };
        (self.cdf[i] - lo) / self.cdf[self.cdf.len() - 1]
    }

    /// A rank in `1..=n`.
    #[inline]
    pub fn sample(&self, rng: &mut impl RngCore) -> u64 {
        let u = unit(rng) * self.cdf[self.cdf.len() - 1];
        let i = self.cdf.partition_point(|&c| c <= u);
        i.min(self.cdf.len() - 1) as u64 + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ZipfColumns {
    Both,
    Left,
    Right,
}

/// Zipf-distributed values on the chosen columns (rank `r` becomes id
/// `r - 1`), uniform values elsewhere.
pub fn gen_zipf(
    n_tuples: usize,
    n_max: u64,
    alpha: f64,
    which: ZipfColumns,
    seed: u64,
) -> Result<RawTable> {
    let z = ZipfSampler::new(n_max, alpha)?;
    let mut r = rng(seed);
    let (zl, zr) = match which {
        ZipfColumns::Both => (true, true),
        ZipfColumns::Left => (true, false),
        ZipfColumns::Right => (false, true),
    };
    let mut left = Vec::with_capacity(n_tuples);
    let mut right = Vec::with_capacity(n_tuples);
    for _ in 0..n_tuples {
        left.push(if zl { z.sample(&mut r) - 1 } else { below(&mut r, n_max) });
        right.push(if zr { z.sample(&mut r) - 1 } else { below(&mut r, n_max) });
    }
    RawTable::new(Column::Int(left), Column::Int(right))
}

/// Graph500 quadrant probabilities.
pub const GRAPH500: [f64; 4] = [0.57, 0.19, 0.19, 0.05];

/// `n_edges` directed edges over `2^log2_n` vertices by recursive quadrant
/// descent; `(a, b, c, d)` are the top-left, top-right, bottom-left and
/// bottom-right probabilities.
pub fn gen_rmat(log2_n: u32, n_edges: usize, probs: [f64; 4], seed: u64) -> Result<RawTable> {
    let [a, b, c, d] = probs;
    if probs.iter().any(|p| !(*p >= 0.0)) || ((a + b + c + d) - 1.0).abs() > 1e-9 {
        return Err(Error::Param(format!(
            "R-MAT probabilities must be nonnegative and sum to 1, got {probs:?}"
        )));
    }
    if log2_n > 63 {
        return Err(Error::Param("log2_n must be at most 63".into()));
    }
    let (ab, abc) = (a + b, a + b + c);
    let mut r = rng(seed);
    let mut left = Vec::with_capacity(n_edges);
    let mut right = Vec::with_capacity(n_edges);
    for _ in 0..n_edges {
        let (mut src, mut dst) = (0u64, 0u64);
        for _ in 0..log2_n {
            let u = unit(&mut r);
            let (i, j) = if u < a {
                (0, 0)
            } else if u < ab {
                (0, 1)
            } else if u < abc {
                (1, 0)
            } else {
                (1, 1)
            };
            src = src << 1 | i;
            dst = dst << 1 | j;
        }
        left.push(src);
        right.push(dst);
    }
    RawTable::new(Column::Int(left), Column::Int(right))
}
