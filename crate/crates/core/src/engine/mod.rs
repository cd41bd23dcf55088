//! Strategy selection and orchestration of the mapping, partitioning and
//! kernel phases.
//!
//! The larger input plays `R`. When the caller's `R` is the smaller table the
//! two are exchanged internally and the result remembers it, so pairs always
//! come back as `(x, z)`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::cache::CacheStore;
use crate::classical::{join_dedup_keyed, ClassicalOptions};
use crate::costmodel::{f1, CostConstants, DegreeStats, Dims};
use crate::denseec::{dense_ec_with, CheckMode};
use crate::error::{Error, Result};
use crate::mapping::{map_join_key, map_tables_with, Dictionary, JoinKeyCodes, MapOptions};
use crate::partition::{partition_s, Assignment, PartitionMode, PartitionResult};
use crate::relation::{build_csr, Column, CsrMatrix, Major, RawTable, Value};
use crate::sink::{CountSink, KernelCounters, PairSink, Tally, ZCostStats};
use crate::sparsebmm::sparse_bmm_with;

mod aggregate;

pub use aggregate::{join_aggregate_both, join_aggregate_one, Agg};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Hash join and hash dedup on raw values.
    Classical,
    /// Mapping, then each `z` column to whichever kernel `f2` prefers.
    Hybrid,
    SparseOnly,
    DenseOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Classical,
        Strategy::Hybrid,
        Strategy::SparseOnly,
        Strategy::DenseOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Classical => "classical",
            Strategy::Hybrid => "hybrid",
            Strategy::SparseOnly => "sparse_only",
            Strategy::DenseOnly => "dense_only",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s || st.as_str().replace('_', "-") == s)
            .ok_or_else(|| Error::Param(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EngineConfig {
    /// Skip the cost model and use this strategy.
    pub force_strategy: Option<Strategy>,
    /// Track per-`z` kernel work for the result cache.
    pub collect_cache_stats: bool,
    pub worker_count: usize,
    /// Bytes allowed for the bit panel, accumulators and the classical dedup set.
    pub memory_budget: u64,
    /// Keep the result pairs; otherwise only count them.
    pub materialize: bool,
    pub check_mode: CheckMode,
    pub map: MapOptions,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            force_strategy: None,
            collect_cache_stats: false,
            worker_count: 1,
            memory_budget: 2 << 30,
            materialize: true,
            check_mode: CheckMode::Auto,
            map: MapOptions::default(),
        }
    }
}

impl EngineConfig {
    pub fn forced(strategy: Strategy) -> Self {
        EngineConfig {
            force_strategy: Some(strategy),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.worker_count == 0 {
            return Err(Error::Param("worker_count must be at least 1".into()));
        }
        Ok(())
    }
}

/// Whether pair ids index raw rows or dictionary codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    /// `(R row, S row)` representatives.
    Raw,
    /// `(x code, z code)`.
    Mapped,
}

#[derive(Debug, Clone)]
pub(crate) enum Decoder {
    Rows(Arc<Column>),
    Codes(Arc<Dictionary>),
}

impl Decoder {
    fn value(&self, id: u32) -> Value {
        match self {
            Decoder::Rows(c) => c.value(id as usize),
            Decoder::Codes(d) => d.value(id),
        }
    }

    fn gather(&self, ids: impl Iterator<Item = u32>) -> Column {
        match self {
            Decoder::Rows(c) => c.gather(ids.map(|i| i as usize)),
            Decoder::Codes(d) => match d.reverse() {
                Some(c) => c.gather(ids.map(|i| i as usize)),
                None => Column::Int(ids.map(u64::from).collect()),
            },
        }
    }
}

/// Distinct `(x, z)` pairs, possibly with one aggregate per pair.
#[derive(Debug, Clone)]
pub struct ResultSet {
    /// Internal orientation: the first id belongs to the larger input.
    pairs: Vec<(u32, u32)>,
    count: u64,
    swapped: bool,
    materialized: bool,
    provenance: Provenance,
    left: Decoder,
    right: Decoder,
    aggregates: Option<Vec<f64>>,
}

impl ResultSet {
    /// Number of distinct pairs, whether or not they were kept.
    pub fn len(&self) -> u64 {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn is_materialized(&self) -> bool {
        self.materialized
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }

    /// Set when the caller's `R` was the smaller input.
    pub fn swapped(&self) -> bool {
        self.swapped
    }

    /// Pair ids in `(x, z)` order; rows or codes per [`Self::provenance`].
    pub fn ids(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let sw = self.swapped;
        self.pairs
            .iter()
            .map(move |&(a, b)| if sw { (b, a) } else { (a, b) })
    }

    /// The pair at position `i` as raw values.
    pub fn raw_pair(&self, i: usize) -> (Value, Value) {
        let (a, b) = self.pairs[i];
        let (a, b) = (self.left.value(a), self.right.value(b));
        if self.swapped {
            (b, a)
        } else {
            (a, b)
        }
    }

    /// All pairs as raw `(x, z)` values, in kernel emission order.
    pub fn raw_pairs(&self) -> Vec<(Value, Value)> {
        (0..self.pairs.len()).map(|i| self.raw_pair(i)).collect()
    }

    /// The pairs as a two-column table `(x, z)`.
    pub fn to_table(&self) -> Result<RawTable> {
        let (l, r) = (
            self.left.gather(self.pairs.iter().map(|p| p.0)),
            self.right.gather(self.pairs.iter().map(|p| p.1)),
        );
        if self.swapped {
            RawTable::new(r, l)
        } else {
            RawTable::new(l, r)
        }
    }

    pub fn aggregates(&self) -> Option<&[f64]> {
        self.aggregates.as_deref()
    }

    pub(crate) fn internal_pairs(&self) -> &[(u32, u32)] {
        &self.pairs
    }
}

/// Wall-clock seconds per phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub join_key: f64,
    pub mapping: f64,
    pub partition: f64,
    pub sparse: f64,
    pub dense: f64,
    pub classical: f64,
    pub cache_decode: f64,
    pub total: f64,
}

/// What one run did. Pair counts per source add up to `out_p`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub strategy: Option<Strategy>,
    pub forced: bool,
    pub swapped: bool,
    pub r_rows: u64,
    pub s_rows: u64,
    pub out_j: u64,
    pub out_j_saturated: bool,
    pub f1: f64,
    pub x_card: u64,
    pub y_card: u64,
    pub z_card: u64,
    pub dropped_r: u64,
    pub sparse_z: u64,
    pub dense_z: u64,
    pub cached_z: u64,
    pub f2_evaluations: u64,
    pub sparse_pairs: u64,
    pub dense_pairs: u64,
    pub cached_pairs: u64,
    pub classical_pairs: u64,
    pub out_p: u64,
    pub sparse_inner: u64,
    pub wide_checks: u64,
    pub probe_checks: u64,
    pub blocks: u64,
    pub probes: u64,
    pub panel_bytes: u64,
    pub spa_bytes: u64,
    pub timings: Timings,
}

impl ExecutionReport {
    /// `key=value` lines; nested timings are prefixed with `t_`.
    pub fn to_text(&self) -> String {
        let v = serde_json::to_value(self).expect("report serializes");
        let mut out = String::new();
        for (k, v) in v.as_object().expect("report is an object") {
            if let Some(inner) = v.as_object() {
                for (k2, v2) in inner {
                    out.push_str(&format!("t_{k2}={v2}\n"));
                }
            } else {
                let v = v.as_str().map_or_else(|| v.to_string(), str::to_owned);
                out.push_str(&format!("{k}={v}\n"));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// True when the per-source pair counts add up to `out_p`.
    pub fn reconciles(&self) -> bool {
        self.sparse_pairs + self.dense_pairs + self.cached_pairs + self.classical_pairs == self.out_p
    }
}

/// A result with its report and, when requested, per-`z` work counters
/// indexed by internal `z` code.
#[derive(Debug, Clone)]
pub struct JoinRun {
    pub result: ResultSet,
    pub report: ExecutionReport,
    pub z_stats: Vec<ZCostStats>,
}

/// `Π_{x,z}(R ⋈_y S)` without duplicates.
pub fn join_project(r: &RawTable, s: &RawTable, cfg: &EngineConfig, c: &CostConstants) -> Result<ResultSet> {
    Ok(run(r, s, cfg, c)?.result)
}

/// [`join_project`] keeping the execution report.
pub fn run(r: &RawTable, s: &RawTable, cfg: &EngineConfig, c: &CostConstants) -> Result<JoinRun> {
    run_inner(r, s, cfg, c, None)
}

/// Orients the inputs so the second is no larger than the first.
pub(crate) fn orient<'a>(r: &'a RawTable, s: &'a RawTable) -> (&'a RawTable, &'a RawTable, bool) {
    if r.len() < s.len() {
        (s, r, true)
    } else {
        (r, s, false)
    }
}

/// Mapped inputs ready for the kernels.
pub(crate) struct Prepared {
    pub dict_x: Arc<Dictionary>,
    pub dict_z: Arc<Dictionary>,
    pub r_csr: CsrMatrix,
    pub s_by_y: CsrMatrix,
    pub stats: DegreeStats,
    pub dims: Dims,
}

pub(crate) fn run_inner(
    r: &RawTable,
    s: &RawTable,
    cfg: &EngineConfig,
    c: &CostConstants,
    cache: Option<&CacheStore>,
) -> Result<JoinRun> {
    cfg.validate()?;
    let start = Instant::now();
    let (r, s, swapped) = orient(r, s);
    let mut rep = ExecutionReport {
        swapped,
        r_rows: r.len() as u64,
        s_rows: s.len() as u64,
        ..Default::default()
    };

    let t = Instant::now();
    let y = map_join_key(r, s, &cfg.map)?;
    (rep.out_j, rep.out_j_saturated) = y.join_size();
    rep.y_card = y.dict.len() as u64;
    rep.f1 = f1(r.len() as u64, s.len() as u64, rep.out_j, c);
    rep.timings.join_key = t.elapsed().as_secs_f64();

    let strategy = match (cache, cfg.force_strategy) {
        (Some(_), _) => Strategy::Hybrid,
        (None, Some(st)) => st,
        (None, None) if rep.f1 > 0.0 => Strategy::Classical,
        (None, None) => Strategy::Hybrid,
    };
    rep.strategy = Some(strategy);
    rep.forced = cache.is_some() || cfg.force_strategy.is_some();

    if strategy == Strategy::Classical {
        let t = Instant::now();
        let opts = ClassicalOptions {
            memory_budget: cfg.memory_budget,
            materialize: cfg.materialize,
        };
        let out = join_dedup_keyed(r, s, &y.r_y, &y.s_y, y.dict.len(), &opts)?;
        rep.timings.classical = t.elapsed().as_secs_f64();
        rep.classical_pairs = out.count;
        rep.out_p = out.count;
        rep.timings.total = start.elapsed().as_secs_f64();
        let result = ResultSet {
            pairs: out.pairs,
            count: out.count,
            swapped,
            materialized: cfg.materialize,
            provenance: Provenance::Raw,
            left: Decoder::Rows(Arc::clone(r.left())),
            right: Decoder::Rows(Arc::clone(s.left())),
            aggregates: None,
        };
        return Ok(JoinRun {
            result,
            report: rep,
            z_stats: Vec::new(),
        });
    }

    let t = Instant::now();
    let (p, dropped_r) = prepare_with(r, s, y, &cfg.map)?;
    rep.dropped_r = dropped_r as u64;
    rep.x_card = p.dims.x as u64;
    rep.z_card = p.dims.z as u64;
    rep.timings.mapping = t.elapsed().as_secs_f64();

    let cached_mask = match cache {
        Some(store) => Some(store.mask_for(&p)?),
        None => None,
    };
    let mode = match strategy {
        Strategy::SparseOnly => PartitionMode::AllSparse,
        Strategy::DenseOnly => PartitionMode::AllDense,
        _ => PartitionMode::Cost,
    };
    let t = Instant::now();
    let part = partition_s(&p.s_by_y, &p.stats, p.dims, c, mode, cached_mask.as_deref(), cfg.memory_budget)?;
    rep.timings.partition = t.elapsed().as_secs_f64();
    rep.sparse_z = part.count(Assignment::Sparse) as u64;
    rep.dense_z = part.count(Assignment::Dense) as u64;
    rep.cached_z = part.count(Assignment::Cached) as u64;
    rep.f2_evaluations = part.f2_evaluations;
    rep.panel_bytes = part.s_dense.bytes() as u64;

    let counters = if cfg.collect_cache_stats {
        KernelCounters::per_z(p.dims.z)
    } else {
        KernelCounters::new()
    };
    let (mut pairs, counters) = if cfg.materialize {
        let (sp, de, k) = kernels(&p.r_csr, &part, cfg, c, Vec::new, &counters, &mut rep)?;
        rep.sparse_pairs = sp.iter().map(|v| v.len() as u64).sum();
        rep.dense_pairs = de.iter().map(|v| v.len() as u64).sum();
        (sp.into_iter().chain(de).flatten().collect::<Vec<_>>(), k)
    } else {
        let (sp, de, k) = kernels(&p.r_csr, &part, cfg, c, CountSink::default, &counters, &mut rep)?;
        rep.sparse_pairs = sp.iter().map(|s| s.0).sum();
        rep.dense_pairs = de.iter().map(|s| s.0).sum();
        (Vec::new(), k)
    };
    rep.sparse_inner = counters.inner;
    rep.wide_checks = counters.wide_checks;
    rep.probe_checks = counters.probe_checks;
    rep.blocks = counters.blocks;
    rep.probes = counters.probes;

    if let Some(store) = cache {
        let t = Instant::now();
        let before = pairs.len();
        rep.cached_pairs = store.decode_into(&mut pairs, cfg.materialize);
        debug_assert!(!cfg.materialize || pairs.len() - before == rep.cached_pairs as usize);
        rep.timings.cache_decode = t.elapsed().as_secs_f64();
    }
    rep.out_p = rep.sparse_pairs + rep.dense_pairs + rep.cached_pairs;
    rep.timings.total = start.elapsed().as_secs_f64();

    let mut z_stats = counters.per_z;
    if cfg.collect_cache_stats {
        for (z, a) in part.z_assignment.iter().enumerate() {
            if *a == Assignment::Cached {
                z_stats[z].k = store_k(cache, z as u32);
            }
        }
    }
    Ok(JoinRun {
        result: ResultSet {
            pairs,
            count: rep.out_p,
            swapped,
            materialized: cfg.materialize,
            provenance: Provenance::Mapped,
            left: Decoder::Codes(p.dict_x),
            right: Decoder::Codes(p.dict_z),
            aggregates: None,
        },
        report: rep,
        z_stats,
    })
}

fn store_k(cache: Option<&CacheStore>, z: u32) -> u64 {
    cache.and_then(|s| s.k_of(z)).unwrap_or(0)
}

type KernelOut<S> = (Vec<S>, Vec<S>, KernelCounters);

/// Runs SparseBMM on the sparse part and DenseEC on the panel; either is
/// skipped when its part is empty.
fn kernels<S: PairSink>(
    r_csr: &CsrMatrix,
    part: &PartitionResult,
    cfg: &EngineConfig,
    c: &CostConstants,
    new_sink: impl Fn() -> S + Sync + Copy,
    counters: &KernelCounters,
    rep: &mut ExecutionReport,
) -> Result<KernelOut<S>> {
    let mut total = counters.fork();
    let mut sparse = Vec::new();
    if part.s_sparse.nnz() > 0 {
        let spa = part.s_sparse.n_cols() as u64 * 8 * cfg.worker_count as u64;
        if spa > cfg.memory_budget {
            return Err(Error::Resource(format!(
                "accumulators need {spa} bytes, budget is {}",
                cfg.memory_budget
            )));
        }
        rep.spa_bytes = spa;
        let t = Instant::now();
        for (sink, k) in sparse_bmm_with(r_csr, &part.s_sparse, cfg.worker_count, new_sink, counters) {
            sparse.push(sink);
            total.merge(k);
        }
        rep.timings.sparse = t.elapsed().as_secs_f64();
    }
    let mut dense = Vec::new();
    if !part.s_dense.is_empty() {
        let t = Instant::now();
        for (sink, k) in dense_ec_with(r_csr, &part.s_dense, cfg.check_mode, c, cfg.worker_count, new_sink, counters) {
            dense.push(sink);
            total.merge(k);
        }
        rep.timings.dense = t.elapsed().as_secs_f64();
    }
    Ok((sparse, dense, total))
}

/// Finishes mapping from join-key codes and builds both CSR views. Also
/// returns the number of `R` rows dropped by the semi-join.
fn prepare_with(r: &RawTable, s: &RawTable, y: JoinKeyCodes, map: &MapOptions) -> Result<(Prepared, usize)> {
    let m = map_tables_with(r, s, y, map)?;
    let r_csr = build_csr(&m.r_mapped, Major::ByA);
    let s_by_y = build_csr(&m.s_mapped, Major::ByB);
    let stats = DegreeStats::new(&r_csr, &s_by_y);
    let dims = Dims {
        x: r_csr.n_rows(),
        y: s_by_y.n_rows(),
        z: s_by_y.n_cols(),
        r: r_csr.nnz(),
        s: s_by_y.nnz(),
    };
    let p = Prepared {
        dict_x: Arc::new(m.dict_x),
        dict_z: Arc::new(m.dict_z),
        r_csr,
        s_by_y,
        stats,
        dims,
    };
    Ok((p, m.dropped_r))
}
