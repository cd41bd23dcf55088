//! Join-Aggregate queries.
//!
//! With attributes from both tables, `G_{x,z; agg(f(v,u))}(R ⋈ S)` runs like
//! the join-project kernels but keeps an accumulator per `(x, z)`: the sparse
//! side uses an accumulator array over `z` that is reset after every row, the
//! dense side a plain accumulator row over the dense columns.
//!
//! With attributes from `S` only, `G_{x; agg(z)}(R ⋈ S)` is evaluated as
//! `G_{x; agg''}(R ⋈ G_{y; agg'}(S))`, a join against a table that has one
//! row per `y`, so the hash join needs no mapping.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{Decoder, EngineConfig, Provenance, ResultSet, Strategy};
use crate::costmodel::{CostConstants, DegreeStats, Dims};
use crate::error::{Error, Result};
use crate::hash::FastMap;
use crate::mapping::{map_join_key, map_tables_with, EMPTY};
use crate::partition::{assign, Assignment, PartitionMode};
use crate::relation::{build_csr, with_keys, Column, Keys, Major, RawTable, Value};
use crate::sink::{run_ranges, split_rows};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agg {
    Sum,
    Count,
    Min,
    Max,
    Avg,
}

impl Agg {
    pub const ALL: [Agg; 5] = [Agg::Sum, Agg::Count, Agg::Min, Agg::Max, Agg::Avg];

    pub fn as_str(self) -> &'static str {
        match self {
            Agg::Sum => "sum",
            Agg::Count => "count",
            Agg::Min => "min",
            Agg::Max => "max",
            Agg::Avg => "avg",
        }
    }
}

impl fmt::Display for Agg {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Agg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Agg::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Param(format!("unknown aggregate {s:?}")))
    }
}

/// Running sum, count, min and max; enough to finish any [`Agg`] and to
/// merge partial groups.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Acc {
    sum: f64,
    n: u64,
    min: f64,
    max: f64,
}

impl Acc {
    const EMPTY: Acc = Acc {
        sum: 0.0,
        n: 0,
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
    };

    #[inline]
    fn add(&mut self, v: f64) {
        self.sum += v;
        self.n += 1;
        self.min = self.min.min(v);
        self.max = self.max.max(v);
    }

    #[inline]
    fn merge(&mut self, o: &Acc) {
        self.sum += o.sum;
        self.n += o.n;
        self.min = self.min.min(o.min);
        self.max = self.max.max(o.max);
    }

    fn finish(&self, agg: Agg) -> f64 {
        match agg {
            Agg::Sum => self.sum,
            Agg::Count => self.n as f64,
            Agg::Min => self.min,
            Agg::Max => self.max,
            Agg::Avg => self.sum / self.n as f64,
        }
    }
}

/// Rows of one side grouped by a code, each carrying a payload.
struct Grouped<T> {
    ptr: Vec<usize>,
    items: Vec<T>,
}

impl<T: Copy + Default> Grouped<T> {
    fn new(n_groups: usize, entries: impl Iterator<Item = (u32, T)> + Clone) -> Self {
        let mut ptr = vec![0usize; n_groups + 1];
        for (g, _) in entries.clone() {
            ptr[g as usize + 1] += 1;
        }
        for i in 0..n_groups {
            ptr[i + 1] += ptr[i];
        }
        let mut fill = ptr.clone();
        let mut items = vec![T::default(); ptr[n_groups]];
        for (g, t) in entries {
            items[fill[g as usize]] = t;
            fill[g as usize] += 1;
        }
        Grouped { ptr, items }
    }

    #[inline]
    fn group(&self, g: usize) -> &[T] {
        &self.items[self.ptr[g]..self.ptr[g + 1]]
    }
}

/// `agg(combine(v, u))` over all join tuples of each distinct `(x, z)`.
/// `r_vals` and `s_vals` hold one number per row of `r` and `s`. Every
/// strategy but `classical` maps the inputs and splits `z` columns between
/// the two accumulator layouts; the tables are not exchanged by size.
#[allow(clippy::too_many_arguments)]
pub fn join_aggregate_both(
    r: &RawTable,
    r_vals: &[f64],
    s: &RawTable,
    s_vals: &[f64],
    combine: impl Fn(f64, f64) -> f64 + Sync,
    agg: Agg,
    cfg: &EngineConfig,
    c: &CostConstants,
) -> Result<ResultSet> {
    cfg.validate()?;
    if r_vals.len() != r.len() || s_vals.len() != s.len() {
        return Err(Error::Param(format!(
            "value columns have {} and {} entries for tables of {} and {} rows",
            r_vals.len(),
            s_vals.len(),
            r.len(),
            s.len()
        )));
    }
    let y = map_join_key(r, s, &cfg.map)?;
    let (_, saturated) = y.join_size();
    if saturated {
        return Err(Error::Resource("join size overflows the 64-bit count".into()));
    }
    if cfg.force_strategy == Some(Strategy::Classical) {
        return classical_both(r, r_vals, s, s_vals, &y.r_y, &y.s_y, y.dict.len(), &combine, agg);
    }

    let m = map_tables_with(r, s, y, &cfg.map)?;
    let (n_x, n_y, n_z) = (m.dict_x.len(), m.dict_y.len(), m.dict_z.len());
    let r_csr = build_csr(&m.r_mapped, Major::ByA);
    let s_by_y = build_csr(&m.s_mapped, Major::ByB);
    let stats = DegreeStats::new(&r_csr, &s_by_y);
    let dims = Dims {
        x: n_x,
        y: n_y,
        z: n_z,
        r: r_csr.nnz(),
        s: s_by_y.nnz(),
    };
    let mode = match cfg.force_strategy {
        Some(Strategy::SparseOnly) => PartitionMode::AllSparse,
        Some(Strategy::DenseOnly) => PartitionMode::AllDense,
        _ => PartitionMode::Cost,
    };
    let (assignment, _) = assign(&stats, dims, c, mode, None);
    let mut dense_slot = vec![EMPTY; n_z];
    let mut dense_z = Vec::new();
    for (z, a) in assignment.iter().enumerate() {
        if *a == Assignment::Dense {
            dense_slot[z] = dense_z.len() as u32;
            dense_z.push(z as u32);
        }
    }
    let d = dense_z.len() as u64;
    let need = (n_z as u64 + d) * std::mem::size_of::<Acc>() as u64 * cfg.worker_count as u64;
    if need > cfg.memory_budget {
        return Err(Error::Resource(format!(
            "aggregate accumulators need {need} bytes, budget is {}",
            cfg.memory_budget
        )));
    }

    // R by x with its values; S by y split into sparse (z, u) and dense (slot, u)
    let rows = Grouped::new(
        n_x,
        m.r_mapped
            .pairs
            .iter()
            .zip(&m.r_rows)
            .map(|(&(x, y), &i)| (x, (y, r_vals[i as usize]))),
    );
    let s_pairs = &m.s_mapped.pairs;
    let sparse = Grouped::new(
        n_y,
        s_pairs
            .iter()
            .zip(s_vals)
            .filter(|((z, _), _)| dense_slot[*z as usize] == EMPTY)
            .map(|(&(z, y), &u)| (y, (z, u))),
    );
    let dense = Grouped::new(
        n_y,
        s_pairs
            .iter()
            .zip(s_vals)
            .filter(|((z, _), _)| dense_slot[*z as usize] != EMPTY)
            .map(|(&(z, y), &u)| (y, (dense_slot[z as usize], u))),
    );

    let chunks = run_ranges(split_rows(&rows.ptr, cfg.worker_count), |range| {
        let mut pairs = Vec::new();
        let mut out = Vec::new();
        let mut spa = vec![Acc::EMPTY; n_z];
        let mut touched: Vec<u32> = Vec::new();
        let mut row = vec![Acc::EMPTY; dense_z.len()];
        for x in range {
            let group = rows.group(x);
            if group.is_empty() {
                continue;
            }
            for &(y, v) in group {
                for &(z, u) in sparse.group(y as usize) {
                    let a = &mut spa[z as usize];
                    if a.n == 0 {
                        touched.push(z);
                    }
                    a.add(combine(v, u));
                }
            }
            for z in touched.drain(..) {
                let a = &mut spa[z as usize];
                pairs.push((x as u32, z));
                out.push(a.finish(agg));
                *a = Acc::EMPTY;
            }
            if dense_z.is_empty() {
                continue;
            }
            for &(y, v) in group {
                for &(j, u) in dense.group(y as usize) {
                    row[j as usize].add(combine(v, u));
                }
            }
            for (j, a) in row.iter_mut().enumerate() {
                if a.n > 0 {
                    pairs.push((x as u32, dense_z[j]));
                    out.push(a.finish(agg));
                }
                *a = Acc::EMPTY;
            }
        }
        (pairs, out)
    });
    let mut pairs = Vec::new();
    let mut values = Vec::new();
    for (p, v) in chunks {
        pairs.extend(p);
        values.extend(v);
    }
    Ok(ResultSet {
        count: pairs.len() as u64,
        pairs,
        swapped: false,
        materialized: true,
        provenance: Provenance::Mapped,
        left: Decoder::Codes(Arc::new(m.dict_x)),
        right: Decoder::Codes(Arc::new(m.dict_z)),
        aggregates: Some(values),
    })
}

#[allow(clippy::too_many_arguments)]
fn classical_both(
    r: &RawTable,
    r_vals: &[f64],
    s: &RawTable,
    s_vals: &[f64],
    r_y: &[u32],
    s_y: &[u32],
    n_y: usize,
    combine: &(impl Fn(f64, f64) -> f64 + Sync),
    agg: Agg,
) -> Result<ResultSet> {
    let by_y = Grouped::new(n_y, s_y.iter().enumerate().map(|(i, &y)| (y, i as u32)));
    let (pairs, values) = with_keys!(r.left().as_ref(), xs => with_keys!(s.left().as_ref(), zs => {
        let mut groups = FastMap::default();
        let mut pairs: Vec<(u32, u32)> = Vec::new();
        let mut accs: Vec<Acc> = Vec::new();
        for (ri, &y) in r_y.iter().enumerate() {
            if y == EMPTY {
                continue;
            }
            for &si in by_y.group(y as usize) {
                let key = (xs.key(ri), zs.key(si as usize));
                let g = *groups.entry(key).or_insert_with(|| {
                    pairs.push((ri as u32, si));
                    accs.push(Acc::EMPTY);
                    accs.len() - 1
                });
                accs[g].add(combine(r_vals[ri], s_vals[si as usize]));
            }
        }
        (pairs, accs.iter().map(|a| a.finish(agg)).collect::<Vec<_>>())
    }));
    Ok(ResultSet {
        count: pairs.len() as u64,
        pairs,
        swapped: false,
        materialized: true,
        provenance: Provenance::Raw,
        left: Decoder::Rows(Arc::clone(r.left())),
        right: Decoder::Rows(Arc::clone(s.left())),
        aggregates: Some(values),
    })
}

fn numeric(col: &Column, i: usize) -> Result<f64> {
    match col {
        Column::Int(v) => Ok(v[i] as f64),
        Column::Bytes(b) => {
            let text = std::str::from_utf8(b.get(i)).unwrap_or("");
            text.trim()
                .parse()
                .map_err(|_| Error::Param(format!("value {text:?} is not numeric")))
        }
    }
}

/// `agg(z)` per `x` over `R(x,y) ⋈ S(z,y)`, via pre-aggregation of `S` by
/// `y`. Rows come in first-seen order of `x`; `x` values without a join
/// partner are absent.
pub fn join_aggregate_one(r: &RawTable, s: &RawTable, agg: Agg, cfg: &EngineConfig) -> Result<Vec<(Value, f64)>> {
    let y = map_join_key(r, s, &cfg.map)?;
    let mut sg = vec![Acc::EMPTY; y.dict.len()];
    let z = s.left();
    for (i, &code) in y.s_y.iter().enumerate() {
        let v = if agg == Agg::Count { 0.0 } else { numeric(z, i)? };
        sg[code as usize].add(v);
    }
    let (keys, accs) = with_keys!(r.left().as_ref(), xs => {
        let mut index = FastMap::default();
        let mut keys = Vec::new();
        let mut accs: Vec<Acc> = Vec::new();
        for (ri, &code) in y.r_y.iter().enumerate() {
            if code == EMPTY {
                continue;
            }
            let g = *index.entry(xs.key(ri)).or_insert_with(|| {
                keys.push(ri);
                accs.push(Acc::EMPTY);
                accs.len() - 1
            });
            accs[g].merge(&sg[code as usize]);
        }
        (keys, accs)
    });
    Ok(keys
        .into_iter()
        .zip(accs)
        .map(|(ri, a)| (r.left().value(ri), a.finish(agg)))
        .collect())
}
