//! Splitting `S` by whole `z` columns into a sparse CSR part and a dense bit
//! panel. Since no column is split, the two kernels produce disjoint `z` sets.

use serde::{Deserialize, Serialize};

use crate::costmodel::{CostConstants, DegreeStats, Dims, F2Model};
use crate::denseec::BitmapPanel;
use crate::error::Result;
use crate::relation::CsrMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Assignment {
    Sparse,
    Dense,
    /// Served from the result cache; in neither structure.
    Cached,
}

/// How columns are assigned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PartitionMode {
    /// Dense iff `f2 > 0`.
    #[default]
    Cost,
    AllSparse,
    AllDense,
}

#[derive(Debug, Clone)]
pub struct PartitionResult {
    /// Sparse-column tuples of `S`, keyed by `y`.
    pub s_sparse: CsrMatrix,
    pub s_dense: BitmapPanel,
    pub z_assignment: Vec<Assignment>,
    pub f2_evaluations: u64,
}

impl PartitionResult {
    pub fn count(&self, a: Assignment) -> usize {
        self.z_assignment.iter().filter(|&&x| x == a).count()
    }
}

/// Per-`z` assignment and the number of `f2` evaluations it took. Columns
/// flagged in `cached` are not evaluated.
pub fn assign(
    stats: &DegreeStats,
    dims: Dims,
    c: &CostConstants,
    mode: PartitionMode,
    cached: Option<&[bool]>,
) -> (Vec<Assignment>, u64) {
    let is_cached = |z: usize| cached.is_some_and(|m| m.get(z).copied().unwrap_or(false));
    let model = (mode == PartitionMode::Cost).then(|| F2Model::new(stats, dims, c));
    let mut evaluations = 0;
    let z_assignment = (0..stats.m_z.len())
        .map(|z| {
            if is_cached(z) {
                return Assignment::Cached;
            }
            match (&model, mode) {
                (Some(m), _) => {
                    evaluations += 1;
                    let m_z = stats.m_z[z] as u64;
                    if m.score(m_z) > 0.0 && m_z > 0 {
                        Assignment::Dense
                    } else {
                        Assignment::Sparse
                    }
                }
                (None, PartitionMode::AllDense) => Assignment::Dense,
                _ => Assignment::Sparse,
            }
        })
        .collect();
    (z_assignment, evaluations)
}

/// Partitions `S` (keyed by `y`). Columns flagged in `cached` are excluded
/// from both parts. The panel is refused when it would exceed `budget` bytes.
pub fn partition_s(
    s_by_y: &CsrMatrix,
    stats: &DegreeStats,
    dims: Dims,
    c: &CostConstants,
    mode: PartitionMode,
    cached: Option<&[bool]>,
    budget: u64,
) -> Result<PartitionResult> {
    let z_card = s_by_y.n_cols();
    let (z_assignment, evaluations) = assign(stats, dims, c, mode, cached);
    let mut dense_index = vec![u32::MAX; z_card];
    let mut dense_z = Vec::new();
    for (z, a) in z_assignment.iter().enumerate() {
        if *a == Assignment::Dense {
            dense_index[z] = dense_z.len() as u32;
            dense_z.push(z as u32);
        }
    }
    let mut panel = BitmapPanel::zeroed(dense_z, s_by_y.n_rows(), c.w, budget)?;
    for y in 0..s_by_y.n_rows() {
        for &z in s_by_y.row(y) {
            let j = dense_index[z as usize];
            if j != u32::MAX {
                panel.set(j as usize, y as u32);
            }
        }
    }
    let s_sparse = if panel.is_empty() && cached.is_none() {
        s_by_y.clone()
    } else {
        s_by_y.filter_cols(|z| z_assignment[z as usize] == Assignment::Sparse)
    };
    Ok(PartitionResult {
        s_sparse,
        s_dense: panel,
        z_assignment,
        f2_evaluations: evaluations,
    })
}
