//! Boolean sparse matrix product `R · S` over CSR inputs with a stamped
//! sparse accumulator for deduplication.
//!
//! The accumulator holds, per `z`, the last `x` that emitted it. Stamps only
//! grow with the outer loop, so the array is initialized once for the whole
//! product instead of once per row.

use std::ops::Range;

use crate::relation::CsrMatrix;
use crate::sink::{run_ranges, split_rows, PairSink, Tally};

/// The stamp array; `-1` marks a `z` no row has emitted yet.
#[derive(Debug, Clone)]
pub struct Spa {
    stamps: Vec<i64>,
}

impl Spa {
    pub fn new(z_card: usize) -> Self {
        Spa {
            stamps: vec![-1; z_card],
        }
    }

    pub fn len(&self) -> usize {
        self.stamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stamps.is_empty()
    }

    pub fn bytes(&self) -> usize {
        self.stamps.len() * std::mem::size_of::<i64>()
    }
}

/// Multiplies rows `rows` of `r` (keyed by `x`) with `s` (keyed by `y`).
/// Pairs are emitted in `x` order and, within a row, in first-encounter
/// order of `z`.
#[inline]
pub fn sparse_bmm_range<S: PairSink, T: Tally>(
    r: &CsrMatrix,
    s: &CsrMatrix,
    rows: Range<usize>,
    spa: &mut Spa,
    sink: &mut S,
    tally: &mut T,
) {
    debug_assert_eq!(r.n_cols(), s.n_rows());
    let stamps = &mut spa.stamps[..];
    let (s_ptr, s_col) = (s.row_ptr(), s.col());
    for x in rows {
        let stamp = x as i64;
        for &y in r.row(x) {
            let y = y as usize;
            for &z in &s_col[s_ptr[y]..s_ptr[y + 1]] {
                tally.sparse_hit(z);
                let slot = &mut stamps[z as usize];
                if *slot != stamp {
                    *slot = stamp;
                    sink.push(x as u32, z);
                    tally.emitted(z);
                }
            }
        }
    }
}

/// Runs the product on up to `workers` threads, each with a private
/// accumulator and sink over a contiguous `x` range. Outputs are in `x` order.
pub fn sparse_bmm_with<S: PairSink, T: Tally + Sync>(
    r: &CsrMatrix,
    s: &CsrMatrix,
    workers: usize,
    new_sink: impl Fn() -> S + Sync,
    tally: &T,
) -> Vec<(S, T)> {
    let z_card = s.n_cols();
    run_ranges(split_rows(r.row_ptr(), workers), |rows| {
        let mut spa = Spa::new(z_card);
        let mut sink = new_sink();
        let mut t = tally.fork();
        sparse_bmm_range(r, s, rows, &mut spa, &mut sink, &mut t);
        (sink, t)
    })
}

/// Single-threaded product collecting all pairs.
pub fn sparse_bmm(r: &CsrMatrix, s: &CsrMatrix) -> Vec<(u32, u32)> {
    let mut out = Vec::new();
    let mut spa = Spa::new(s.n_cols());
    sparse_bmm_range(
        r,
        s,
        0..r.n_rows(),
        &mut spa,
        &mut out,
        &mut crate::sink::NoTally,
    );
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relation::{build_csr, Major, MappedTable};
    use crate::sink::{CountSink, KernelCounters, NoTally};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn csrs(r: &[(u32, u32)], s_zy: &[(u32, u32)], x: usize, y: usize, z: usize) -> (CsrMatrix, CsrMatrix) {
        (
            build_csr(&MappedTable::new(r.to_vec(), x, y), Major::ByA),
            build_csr(&MappedTable::new(s_zy.to_vec(), z, y), Major::ByB),
        )
    }

    #[test]
    fn small_example() {
        let (r, s) = csrs(&[(0, 0), (0, 1), (1, 1)], &[(0, 0), (0, 1), (1, 1)], 2, 2, 2);
        let mut t = KernelCounters::new();
        let mut out = Vec::new();
        sparse_bmm_range(&r, &s, 0..2, &mut Spa::new(2), &mut out, &mut t);
        assert_eq!(out, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(t.inner, 5);
    }

    #[test]
    fn empty_s_gives_nothing() {
        let (r, s) = csrs(&[(0, 0)], &[], 1, 1, 1);
        assert!(sparse_bmm(&r, &s).is_empty());
    }

    #[test]
    fn two_paths_emit_once() {
        let (r, s) = csrs(&[(0, 0), (0, 1)], &[(0, 0), (0, 1)], 1, 2, 1);
        assert_eq!(sparse_bmm(&r, &s), vec![(0, 0)]);
    }

    proptest! {
        #[test]
        fn matches_nested_loop_oracle(
            r in proptest::collection::vec((0u32..30, 0u32..20), 0..300),
            s in proptest::collection::vec((0u32..25, 0u32..20), 0..300),
            workers in 1usize..5,
        ) {
            let (rc, sc) = csrs(&r, &s, 30, 20, 25);
            let mut expect = BTreeSet::new();
            let mut out_j = 0u64;
            let rs: BTreeSet<_> = r.iter().copied().collect();
            let ss: BTreeSet<_> = s.iter().copied().collect();
            for &(x, y) in &rs {
                for &(z, y2) in &ss {
                    if y == y2 {
                        expect.insert((x, z));
                        out_j += 1;
                    }
                }
            }
            let parts = sparse_bmm_with(&rc, &sc, workers, Vec::new, &KernelCounters::new());
            let mut got = Vec::new();
            let mut inner = 0;
            for (p, t) in parts {
                got.extend(p);
                inner += t.inner;
            }
            prop_assert_eq!(got.len(), expect.len());
            prop_assert!(got.windows(2).all(|w| w[0].0 <= w[1].0));
            prop_assert_eq!(got.into_iter().collect::<BTreeSet<_>>(), expect);
            prop_assert_eq!(inner, out_j);
            let counts = sparse_bmm_with(&rc, &sc, workers, CountSink::default, &NoTally);
            let n: u64 = counts.iter().map(|(c, _)| c.0).sum();
            prop_assert_eq!(n as usize, sparse_bmm(&rc, &sc).len());
        }
    }
}
