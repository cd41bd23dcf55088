//! Machine time constants and the three path-selection functions.
//!
//! * `f1` decides between the hash-join baseline and the mapped hybrid plan.
//! * `f2` decides, per `z` column, between the sparse and the dense kernel.
//! * `f3` decides, per `(x, z)` check, between word-wise bit probes and wide
//!   block ANDs.

mod calibrate;

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::FastMap;
use crate::relation::CsrMatrix;

pub use calibrate::{calibrate, calibrate_with, CalibrationOptions};

pub const CONSTANTS_VERSION: u32 = 1;
pub const DEFAULT_W: u32 = 256;

/// Seconds per elementary operation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostConstants {
    pub t_seq_r: f64,
    pub t_rand_r: f64,
    pub t_rand_rw: f64,
    pub t_hash: f64,
    pub t_map: f64,
    /// One scalar bit probe in the dense kernel.
    pub t_ec_s: f64,
    /// One `w`-bit block AND in the dense kernel.
    pub t_ec_d: f64,
    pub w: u32,
}

impl CostConstants {
    /// Fixed constants of a typical x86 server, for tests and examples.
    pub fn reference() -> Self {
        CostConstants {
            t_seq_r: 0.5e-9,
            t_rand_r: 4e-9,
            t_rand_rw: 6e-9,
            t_hash: 20e-9,
            t_map: 15e-9,
            t_ec_s: 1.5e-9,
            t_ec_d: 3e-9,
            w: DEFAULT_W,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = self.named();
        if let Some((k, v)) = named.iter().find(|(_, v)| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::Constants(format!("{k} must be positive, got {v}")));
        }
        if self.w == 0 {
            return Err(Error::Constants("W must be positive".into()));
        }
        if self.t_rand_r < self.t_seq_r || self.t_rand_rw < self.t_rand_r {
            return Err(Error::Constants(
                "expected t_seqR <= t_randR <= t_randRW".into(),
            ));
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("t_seqR", self.t_seq_r),
            ("t_randR", self.t_rand_r),
            ("t_randRW", self.t_rand_rw),
            ("t_hash", self.t_hash),
            ("t_map", self.t_map),
            ("t_ECs", self.t_ec_s),
            ("t_ECd", self.t_ec_d),
        ]
    }

    /// `key=value` lines; floats print in shortest round-trip form.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "version={CONSTANTS_VERSION}").unwrap();
        for (k, v) in self.named() {
            writeln!(s, "{k}={v:e}").unwrap();
        }
        writeln!(s, "W={}", self.w).unwrap();
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut vals: FastMap<&str, &str> = FastMap::default();
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Constants(format!("not a key=value line: {line:?}")))?;
            if vals.insert(k.trim(), v.trim()).is_some() {
                return Err(Error::Constants(format!("duplicate key {k}")));
            }
        }
        let mut take = |k: &str| {
            vals.remove(k)
                .ok_or_else(|| Error::Constants(format!("missing key {k}")))
        };
        let version: u32 = take("version")?
            .parse()
            .map_err(|_| Error::Constants("bad version".into()))?;
        if version != CONSTANTS_VERSION {
            return Err(Error::Constants(format!(
                "version {version} is stale, expected {CONSTANTS_VERSION}; recalibrate"
            )));
        }
        let mut f = |k: &str| -> Result<f64> {
            let v = take(k)?;
            v.parse()
                .map_err(|_| Error::Constants(format!("{k}: not a number: {v}")))
        };
        let c = CostConstants {
            t_seq_r: f("t_seqR")?,
            t_rand_r: f("t_randR")?,
            t_rand_rw: f("t_randRW")?,
            t_hash: f("t_hash")?,
            t_map: f("t_map")?,
            t_ec_s: f("t_ECs")?,
            t_ec_d: f("t_ECd")?,
            w: take("W")?
                .parse()
                .map_err(|_| Error::Constants("W: not an integer".into()))?,
        };
        if let Some(k) = vals.keys().next() {
            return Err(Error::Constants(format!("unknown key {k}")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

/// Sizes feeding `f2`: domain cardinalities and table sizes after mapping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Dims {
    pub x: usize,
    pub y: usize,
    pub z: usize,
    pub r: usize,
    pub s: usize,
}

/// Row and column degrees of the mapped inputs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DegreeStats {
    /// Distinct `y` per `x` row of `R`.
    pub m_x: Vec<u32>,
    /// Distinct `y` per `z` column of `S`.
    pub m_z: Vec<u32>,
    pub out_j: u64,
    pub out_j_saturated: bool,
}

impl DegreeStats {
    /// From `R` keyed by `x` and `S` keyed by `y`.
    pub fn new(r_by_x: &CsrMatrix, s_by_y: &CsrMatrix) -> Self {
        let d_r = r_by_x.col_counts();
        let d_s = s_by_y.degrees();
        let (out_j, out_j_saturated) = out_j_from_degrees(&d_r, &d_s);
        DegreeStats {
            m_x: r_by_x.degrees(),
            m_z: s_by_y.col_counts(),
            out_j,
            out_j_saturated,
        }
    }
}

fn out_j_from_degrees(d_r: &[u32], d_s: &[u32]) -> (u64, bool) {
    let mut total: u64 = 0;
    for (&a, &b) in d_r.iter().zip(d_s) {
        match total.checked_add(a as u64 * b as u64) {
            Some(t) => total = t,
            None => return (u64::MAX, true),
        }
    }
    (total, false)
}

/// `Σ_y d_R(y)·d_S(y)` for both inputs keyed by `y`, saturating at `u64::MAX`
/// with the flag set.
pub fn estimate_out_j(r_by_y: &CsrMatrix, s_by_y: &CsrMatrix) -> (u64, bool) {
    out_j_from_degrees(&r_by_y.degrees(), &s_by_y.degrees())
}

/// Positive when the hash-join baseline is expected to win.
pub fn f1(size_r: u64, size_s: u64, out_j: u64, c: &CostConstants) -> f64 {
    2.0 * (size_r + size_s) as f64 * c.t_map + out_j as f64 * (c.t_rand_rw - c.t_hash)
}

/// `(1 − (1 − p)^n) / p`, the mean of a geometric count truncated at `n`.
fn truncated_geometric(p: f64, n: f64) -> f64 {
    if n == 0.0 {
        0.0
    } else if p <= 0.0 {
        n
    } else if p >= 1.0 {
        1.0
    } else {
        -(n * (-p).ln_1p()).exp_m1() / p
    }
}

/// Expected bit probes when scanning `m_x` positions against a column with
/// `m_z` of `y_card` bits set.
pub fn check_nonsimd(m_x: u64, m_z: u64, y_card: u64) -> f64 {
    truncated_geometric(m_z as f64 / y_card as f64, m_x as f64)
}

/// Hit probability of one `w`-bit block AND.
pub fn block_hit_probability(m_x: u64, m_z: u64, y_card: u64, w: u32) -> f64 {
    let y = y_card as f64;
    let q = (m_x as f64 * m_z as f64 / (y * y)).min(1.0);
    -(w as f64 * (-q).ln_1p()).exp_m1()
}

/// Expected block ANDs over `y_card / w` blocks.
pub fn check_simd(m_x: u64, m_z: u64, y_card: u64, w: u32) -> f64 {
    let p_d = block_hit_probability(m_x, m_z, y_card, w);
    truncated_geometric(p_d, y_card as f64 / w as f64)
}

/// Positive when the wide-block path is cheaper.
pub fn f3(m_x: u64, m_z: u64, y_card: u64, c: &CostConstants) -> f64 {
    check_nonsimd(m_x, m_z, y_card) * c.t_ec_s - check_simd(m_x, m_z, y_card, c.w) * c.t_ec_d
}

/// Binary search for the `m_z` threshold assuming `f3` grows with `m_z`:
/// returns the largest `m_zt` such that `f3(m_x, m_zt + 1) > 0` first holds,
/// i.e. one less than the smallest positive point, or `y_card + 1` when `f3`
/// is never positive at `m_z = y_card`.
pub fn f3_threshold(m_x: u64, y_card: u64, c: &CostConstants) -> u64 {
    if f3(m_x, y_card, y_card, c) <= 0.0 {
        return y_card + 1;
    }
    // invariant: f3(hi) > 0, and f3(lo) <= 0 or lo == 0
    let (mut lo, mut hi) = (0u64, y_card);
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if f3(m_x, mid, y_card, c) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    if lo == 0 && f3(m_x, 0, y_card, c) > 0.0 {
        0
    } else {
        hi - 1
    }
}

/// Where `f3` changes sign over `m_z ∈ [1, y_card]` and in which direction.
/// The sign changes at most once, but the direction depends on the constants:
/// with comparable `t_ECs` and `t_ECd` the wide path wins for sparse columns
/// and loses for dense ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct F3Split {
    pub boundary: u64,
    /// Wide path iff `m_z > boundary` when set, iff `m_z <= boundary` otherwise.
    pub wide_above: bool,
}

impl F3Split {
    pub fn new(m_x: u64, y_card: u64, c: &CostConstants) -> Self {
        let pos = |m: u64| f3(m_x, m, y_card, c) > 0.0;
        let (first, last) = (pos(1), pos(y_card));
        if first == last {
            return if first {
                F3Split { boundary: 0, wide_above: true }
            } else {
                F3Split { boundary: y_card, wide_above: true }
            };
        }
        // pos(lo) == first, pos(hi) != first
        let (mut lo, mut hi) = (1u64, y_card);
        while hi - lo > 1 {
            let mid = lo + (hi - lo) / 2;
            if pos(mid) == first {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        F3Split {
            boundary: lo,
            wide_above: !first,
        }
    }

    #[inline]
    pub fn wide(&self, m_z: u64) -> bool {
        (m_z > self.boundary) == self.wide_above
    }
}

/// Per-worker memo of `f3` thresholds keyed by `m_x`.
#[derive(Debug, Clone)]
pub struct ThresholdMemo {
    y_card: u64,
    c: CostConstants,
    thresholds: FastMap<u64, u64>,
    splits: FastMap<u64, F3Split>,
    hits: u64,
}

impl ThresholdMemo {
    pub fn new(y_card: u64, c: &CostConstants) -> Self {
        ThresholdMemo {
            y_card,
            c: *c,
            thresholds: FastMap::default(),
            splits: FastMap::default(),
            hits: 0,
        }
    }

    pub fn threshold(&mut self, m_x: u64) -> u64 {
        if let Some(&t) = self.thresholds.get(&m_x) {
            self.hits += 1;
            return t;
        }
        let t = f3_threshold(m_x, self.y_card, &self.c);
        self.thresholds.insert(m_x, t);
        t
    }

    pub fn split(&mut self, m_x: u64) -> F3Split {
        if let Some(&s) = self.splits.get(&m_x) {
            self.hits += 1;
            return s;
        }
        let s = F3Split::new(m_x, self.y_card, &self.c);
        self.splits.insert(m_x, s);
        s
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }
}

/// Bucket key grouping `m` by leading decimal digit within its decade.
pub fn mx_bucket_key(m: u64) -> u64 {
    debug_assert!(m > 0);
    let d = m.ilog10();
    d as u64 * 10 + m / 10u64.pow(d)
}

const MZ_GROUPS: usize = 100;

/// `f2` over all `z` columns of one input, with `m_x` bucketed and the dense
/// cost memoized per `m_z` group.
#[derive(Debug, Clone)]
pub struct F2Model {
    c: CostConstants,
    dims: Dims,
    sparse_fixed: f64,
    sparse_per_mz: f64,
    /// `(median m_x, rows)` per bucket.
    mx_buckets: Vec<(u64, u64)>,
    /// Representative `m_z` per group, and the cached dense cost.
    mz_group_rep: Vec<u64>,
    dense_cost: Vec<std::cell::Cell<Option<f64>>>,
    evaluations: std::cell::Cell<u64>,
}

impl F2Model {
    pub fn new(stats: &DegreeStats, dims: Dims, c: &CostConstants) -> Self {
        let mut mx: Vec<u64> = stats.m_x.iter().filter(|&&m| m > 0).map(|&m| m as u64).collect();
        mx.sort_unstable();
        let mut mx_buckets = Vec::new();
        for group in mx.chunk_by(|a, b| mx_bucket_key(*a) == mx_bucket_key(*b)) {
            mx_buckets.push((group[group.len() / 2], group.len() as u64));
        }

        let mut members: Vec<Vec<u64>> = vec![Vec::new(); MZ_GROUPS];
        for &m in &stats.m_z {
            members[Self::group_of(m as u64, dims.y)].push(m as u64);
        }
        let mz_group_rep = members
            .into_iter()
            .map(|mut g| {
                g.sort_unstable();
                g.get(g.len() / 2).copied().unwrap_or(0)
            })
            .collect();

        let zc = dims.z.max(1) as f64;
        let sparse_fixed = ((2 * dims.x + dims.r) as f64 * c.t_seq_r
            + 2.0 * dims.r as f64 * c.t_rand_r)
            / zc;
        let sparse_per_mz = if dims.s == 0 {
            0.0
        } else {
            stats.out_j as f64 / dims.s as f64 * (c.t_seq_r + c.t_rand_rw)
        };
        F2Model {
            c: *c,
            dims,
            sparse_fixed,
            sparse_per_mz,
            mx_buckets,
            mz_group_rep,
            dense_cost: vec![std::cell::Cell::new(None); MZ_GROUPS],
            evaluations: std::cell::Cell::new(0),
        }
    }

    fn group_of(m_z: u64, y_card: usize) -> usize {
        if m_z == 0 || y_card == 0 {
            return 0;
        }
        (((m_z - 1) as u128 * MZ_GROUPS as u128 / y_card as u128) as usize).min(MZ_GROUPS - 1)
    }

    /// Modeled SparseBMM cost of one column.
    pub fn t_sparse(&self, m_z: u64) -> f64 {
        self.sparse_fixed + m_z as f64 * self.sparse_per_mz
    }

    /// Modeled DenseEC cost of one column, with `m_z` replaced by its group
    /// representative.
    pub fn t_dense(&self, m_z: u64) -> f64 {
        let g = Self::group_of(m_z, self.dims.y);
        if let Some(v) = self.dense_cost[g].get() {
            return v;
        }
        let rep = self.mz_group_rep[g].max(m_z.min(1));
        let v = self.dense_cost_exact(rep);
        self.dense_cost[g].set(Some(v));
        v
    }

    fn dense_cost_exact(&self, m_z: u64) -> f64 {
        let y = self.dims.y as u64;
        let c = &self.c;
        self.mx_buckets
            .iter()
            .map(|&(m_x, n)| {
                let s = check_nonsimd(m_x, m_z, y) * c.t_ec_s;
                let d = check_simd(m_x, m_z, y, c.w) * c.t_ec_d;
                n as f64 * s.min(d)
            })
            .sum()
    }

    /// `f2` for a column with `m_z` set bits; positive means dense.
    pub fn score(&self, m_z: u64) -> f64 {
        self.evaluations.set(self.evaluations.get() + 1);
        self.t_sparse(m_z) - self.t_dense(m_z)
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations.get()
    }
}

/// `f2` of one column; builds a throwaway model, so prefer [`F2Model`] in loops.
pub fn f2(z: usize, stats: &DegreeStats, dims: Dims, c: &CostConstants) -> f64 {
    F2Model::new(stats, dims, c).score(stats.m_z[z] as u64)
}
