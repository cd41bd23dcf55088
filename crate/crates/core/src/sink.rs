//! Output sinks, kernel instrumentation, and the x-range worker split shared
//! by both kernels.

use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Receives `(x, z)` pairs from a kernel.
pub trait PairSink: Send {
    fn push(&mut self, x: u32, z: u32);
}

impl PairSink for Vec<(u32, u32)> {
    #[inline]
    fn push(&mut self, x: u32, z: u32) {
        Vec::push(self, (x, z))
    }
}

/// Counts pairs and drops them.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CountSink(pub u64);

impl PairSink for CountSink {
    #[inline]
    fn push(&mut self, _x: u32, _z: u32) {
        self.0 += 1;
    }
}

/// Per-`z` work counters collected for the result cache.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZCostStats {
    /// Sparse-kernel inner-body executions.
    pub n_sparse: u64,
    /// Wide block ANDs executed by the dense kernel.
    pub n_simd: u64,
    /// Scalar bit probes executed by the dense kernel.
    pub n_nonsimd: u64,
    /// Result pairs with this `z`.
    pub k: u64,
}

impl ZCostStats {
    fn merge(&mut self, o: &ZCostStats) {
        self.n_sparse = self.n_sparse.saturating_add(o.n_sparse);
        self.n_simd = self.n_simd.saturating_add(o.n_simd);
        self.n_nonsimd = self.n_nonsimd.saturating_add(o.n_nonsimd);
        self.k = self.k.saturating_add(o.k);
    }
}

/// Instrumentation hooks; `NoTally` compiles them away.
pub trait Tally: Send + Sized {
    fn fork(&self) -> Self;
    fn merge(&mut self, other: Self);
    #[inline]
    fn sparse_hit(&mut self, _z: u32) {}
    /// One `(x, z)` existence check and the blocks or probes it used.
    #[inline]
    fn dense_check(&mut self, _z: u32, _wide: bool, _units: u64) {}
    #[inline]
    fn emitted(&mut self, _z: u32) {}
}

#[derive(Debug, Default, Clone, Copy)]
pub struct NoTally;

impl Tally for NoTally {
    fn fork(&self) -> Self {
        NoTally
    }
    fn merge(&mut self, _other: Self) {}
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelCounters {
    /// Sparse inner-body executions.
    pub inner: u64,
    pub wide_checks: u64,
    pub probe_checks: u64,
    pub blocks: u64,
    pub probes: u64,
    /// Indexed by `z` code when per-`z` tracking is on, else empty.
    pub per_z: Vec<ZCostStats>,
}

impl KernelCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn per_z(z_card: usize) -> Self {
        KernelCounters {
            per_z: vec![ZCostStats::default(); z_card],
            ..Self::default()
        }
    }
}

impl Tally for KernelCounters {
    fn fork(&self) -> Self {
        KernelCounters {
            per_z: vec![ZCostStats::default(); self.per_z.len()],
            ..Self::default()
        }
    }

    fn merge(&mut self, o: Self) {
        self.inner += o.inner;
        self.wide_checks += o.wide_checks;
        self.probe_checks += o.probe_checks;
        self.blocks += o.blocks;
        self.probes += o.probes;
        for (a, b) in self.per_z.iter_mut().zip(&o.per_z) {
            a.merge(b);
        }
    }

    #[inline]
    fn sparse_hit(&mut self, z: u32) {
        self.inner += 1;
        if let Some(s) = self.per_z.get_mut(z as usize) {
            s.n_sparse = s.n_sparse.saturating_add(1);
        }
    }

    #[inline]
    fn dense_check(&mut self, z: u32, wide: bool, units: u64) {
        let s = self.per_z.get_mut(z as usize);
        if wide {
            self.wide_checks += 1;
            self.blocks += units;
            if let Some(s) = s {
                s.n_simd = s.n_simd.saturating_add(units);
            }
        } else {
            self.probe_checks += 1;
            self.probes += units;
            if let Some(s) = s {
                s.n_nonsimd = s.n_nonsimd.saturating_add(units);
            }
        }
    }

    #[inline]
    fn emitted(&mut self, z: u32) {
        if let Some(s) = self.per_z.get_mut(z as usize) {
            s.k = s.k.saturating_add(1);
        }
    }
}

/// Splits `[0, n_rows)` into at most `workers` contiguous ranges of roughly
/// equal nonzero count.
#[allow(clippy::single_range_in_vec_init)]
pub(crate) fn split_rows(row_ptr: &[usize], workers: usize) -> Vec<Range<usize>> {
    let n = row_ptr.len() - 1;
    let workers = workers.max(1).min(n.max(1));
    if workers == 1 {
        return vec![0..n];
    }
    let nnz = row_ptr[n];
    let mut out = Vec::with_capacity(workers);
    let mut start = 0;
    for w in 1..workers {
        let target = nnz * w / workers;
        let mut end = row_ptr.partition_point(|&p| p < target).min(n);
        // fall back to row counts when nonzeros are concentrated
        end = end.max(start).max(n * w / workers).min(n);
        out.push(start..end);
        start = end;
    }
    out.push(start..n);
    out.retain(|r| !r.is_empty());
    if out.is_empty() {
        out.push(0..n);
    }
    out
}

/// Runs `f` on each range, on scoped threads when there is more than one,
/// and returns outputs in range order.
pub(crate) fn run_ranges<T: Send>(
    ranges: Vec<Range<usize>>,
    f: impl Fn(Range<usize>) -> T + Sync,
) -> Vec<T> {
    if ranges.len() <= 1 {
        return ranges.into_iter().map(&f).collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = ranges
            .into_iter()
            .map(|r| {
                let f = &f;
                scope.spawn(move || f(r))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("kernel worker panicked"))
            .collect()
    })
}
