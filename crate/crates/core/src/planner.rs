//! Dedup placement for line queries
//! `Π_{x1,x(k+1)}(R1(x1,x2) ⋈ R2(x2,x3) ⋈ … ⋈ Rk(xk,x(k+1)))`.
//!
//! Joins run left-deep in the given order. After join `i` the intermediate
//! is either deduplicated (a join-project) or kept as a bag; the last join is
//! always a join-project. A dedup at `j` is assumed to shrink every later
//! intermediate by `out_p[j] / out_j[j]`. Under that model the cheapest
//! placement follows from `DP_1 = 0` and
//! `DP_i = min_{j<i} DP_j + Σ_{j<h<i} JoinCost_h + JPCost_i`.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::classical::join_bag;
use crate::costmodel::{f1, CostConstants};
use crate::engine::{join_project, EngineConfig, ResultSet};
use crate::error::{Error, Result};
use crate::relation::{load_edge_list, EdgeFormat, LoadOptions, RawTable, Value};

/// Cardinalities of a chain of `k` tables. Index `i` (from 0) describes the
/// prefix `R1 ⋈ … ⋈ R(i+1)`; entry 0 is `|R1|` in both `out_j` and `out_p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub sizes: Vec<u64>,
    pub out_j: Vec<u64>,
    pub out_p: Vec<u64>,
}

impl ChainSpec {
    pub fn k(&self) -> usize {
        self.sizes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k < 2 || self.out_j.len() != k || self.out_p.len() != k {
            return Err(Error::Param(format!(
                "a chain needs k >= 2 tables and k cardinalities, got {k}, {}, {}",
                self.out_j.len(),
                self.out_p.len()
            )));
        }
        if self.out_j[0] != self.sizes[0] || self.out_p[0] != self.sizes[0] {
            return Err(Error::Param("out_j[0] and out_p[0] must equal |R1|".into()));
        }
        for i in 0..k {
            if self.out_p[i] > self.out_j[i] {
                return Err(Error::Param(format!("out_p exceeds out_j at join {}", i + 1)));
            }
        }
        Ok(())
    }

    /// Size ratio left by a dedup after join `j` (1-based).
    fn ratio(&self, j: usize) -> f64 {
        let (p, o) = (self.out_p[j - 1], self.out_j[j - 1]);
        if o == 0 {
            1.0
        } else {
            p as f64 / o as f64
        }
    }
}

/// Join `h` as a plain bag join after the last dedup at `j`.
fn join_cost(spec: &ChainSpec, j: usize, h: usize, c: &CostConstants) -> f64 {
    let f = spec.ratio(j);
    let left = f * spec.out_j[h - 2] as f64;
    let out = f * spec.out_j[h - 1] as f64;
    (left + spec.sizes[h - 1] as f64 + out) * c.t_hash
}

/// Join `i` as a join-project after the last dedup at `j`.
fn jp_cost(spec: &ChainSpec, j: usize, i: usize, c: &CostConstants) -> f64 {
    let f = spec.ratio(j);
    let left = f * spec.out_j[i - 2] as f64;
    let right = spec.sizes[i - 1] as f64;
    let inter = f * spec.out_j[i - 1] as f64;
    let classical = (left + right + 2.0 * inter) * c.t_hash;
    let hybrid = classical + f1(left as u64, right as u64, inter as u64, c);
    classical.min(hybrid) + spec.out_p[i - 1] as f64 * c.t_seq_r
}

/// Dedup positions (1-based join indices, the last one always `k`) and the
/// modeled cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainPlan {
    pub dedup_positions: Vec<usize>,
    pub est_cost: f64,
}

/// Modeled cost of deduplicating after exactly the joins in `positions`.
pub fn plan_cost(spec: &ChainSpec, positions: &[usize], c: &CostConstants) -> f64 {
    let mut prev = 1;
    let mut cost = 0.0;
    for &p in positions {
        cost += (prev + 1..p).map(|h| join_cost(spec, prev, h, c)).sum::<f64>();
        cost += jp_cost(spec, prev, p, c);
        prev = p;
    }
    cost
}

pub fn dp_plan(spec: &ChainSpec, c: &CostConstants) -> Result<ChainPlan> {
    spec.validate()?;
    let k = spec.k();
    let mut dp = vec![f64::INFINITY; k + 1];
    let mut from = vec![0usize; k + 1];
    dp[1] = 0.0;
    for i in 2..=k {
        for j in 1..i {
            let joins: f64 = (j + 1..i).map(|h| join_cost(spec, j, h, c)).sum();
            let total = dp[j] + joins + jp_cost(spec, j, i, c);
            if total < dp[i] {
                dp[i] = total;
                from[i] = j;
            }
        }
    }
    let mut positions = vec![k];
    let mut at = k;
    while from[at] > 1 {
        at = from[at];
        positions.push(at);
    }
    positions.reverse();
    Ok(ChainPlan {
        dedup_positions: positions,
        est_cost: dp[k],
    })
}

/// The cheapest plan found by trying every placement; `2^(k-2)` plans.
pub fn exhaustive_plan(spec: &ChainSpec, c: &CostConstants) -> Result<ChainPlan> {
    spec.validate()?;
    let k = spec.k();
    if k > 30 {
        return Err(Error::Param("exhaustive search is limited to k <= 30".into()));
    }
    let mut best: Option<ChainPlan> = None;
    for mask in 0u32..1 << (k - 2) {
        let mut positions: Vec<usize> = (2..k).filter(|&p| mask >> (p - 2) & 1 == 1).collect();
        positions.push(k);
        let cost = plan_cost(spec, &positions, c);
        if best.as_ref().is_none_or(|b| cost < b.est_cost) {
            best = Some(ChainPlan {
                dedup_positions: positions,
                est_cost: cost,
            });
        }
    }
    Ok(best.expect("at least one placement"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanStrategy {
    Dp,
    /// Dedup after every join.
    Eager,
    /// Dedup only at the end.
    Lazy,
}

impl FromStr for PlanStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dp" => Ok(PlanStrategy::Dp),
            "eager" => Ok(PlanStrategy::Eager),
            "lazy" => Ok(PlanStrategy::Lazy),
            _ => Err(Error::Param(format!("unknown plan strategy {s:?}"))),
        }
    }
}

impl fmt::Display for PlanStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PlanStrategy::Dp => "dp",
            PlanStrategy::Eager => "eager",
            PlanStrategy::Lazy => "lazy",
        })
    }
}

pub fn plan_for(spec: &ChainSpec, strategy: PlanStrategy, c: &CostConstants) -> Result<ChainPlan> {
    spec.validate()?;
    let k = spec.k();
    let positions = match strategy {
        PlanStrategy::Dp => return dp_plan(spec, c),
        PlanStrategy::Eager => (2..=k).collect(),
        PlanStrategy::Lazy => vec![k],
    };
    let est_cost = plan_cost(spec, &positions, c);
    Ok(ChainPlan {
        dedup_positions: positions,
        est_cost,
    })
}

/// Runs the chain left to right. Between dedups the intermediate is a bag of
/// `(x1, x(i+1))` rows; at each position in the plan it goes through
/// [`join_project`]. The final position must be `k`.
pub fn execute_plan(tables: &[RawTable], plan: &ChainPlan, cfg: &EngineConfig, c: &CostConstants) -> Result<ResultSet> {
    let k = tables.len();
    if k < 2 || plan.dedup_positions.last() != Some(&k) {
        return Err(Error::Param(format!(
            "plan {:?} does not end at join {k}",
            plan.dedup_positions
        )));
    }
    let dedup: HashSet<usize> = plan.dedup_positions.iter().copied().collect();
    let cfg = EngineConfig {
        materialize: true,
        ..*cfg
    };
    let mut inter = tables[0].clone();
    for (i, t) in tables.iter().enumerate().skip(1) {
        let join = i + 1;
        // S(z = x(i+1), y = x_i)
        let s = t.swapped();
        if dedup.contains(&join) {
            let res = join_project(&inter, &s, &cfg, c)?;
            if join == k {
                return Ok(res);
            }
            inter = res.to_table()?;
        } else {
            let pairs = join_bag(&inter, &s, cfg.memory_budget)?;
            inter = RawTable::new(
                inter.left().gather(pairs.iter().map(|p| p.0 as usize)),
                s.left().gather(pairs.iter().map(|p| p.1 as usize)),
            )?;
        }
    }
    unreachable!("the last join always deduplicates")
}

/// Exact cardinalities of every prefix join, computed by bag joins with
/// multiplicity counts. Meant for desk-scale inputs.
pub fn exact_spec(tables: &[RawTable]) -> Result<ChainSpec> {
    use crate::hash::FastMap;
    if tables.len() < 2 {
        return Err(Error::Param("a chain needs at least two tables".into()));
    }
    let n0 = tables[0].len() as u64;
    let mut spec = ChainSpec {
        sizes: tables.iter().map(|t| t.len() as u64).collect(),
        out_j: vec![n0],
        out_p: vec![n0],
    };
    // (x1, x_i) -> multiplicity
    let mut cur: FastMap<(Value, Value), u64> = FastMap::default();
    for row in tables[0].rows() {
        *cur.entry(row).or_default() += 1;
    }
    for t in &tables[1..] {
        let mut by_key: FastMap<Value, Vec<Value>> = FastMap::default();
        for (a, b) in t.rows() {
            by_key.entry(a).or_default().push(b);
        }
        let mut next: FastMap<(Value, Value), u64> = FastMap::default();
        for ((x1, xi), m) in &cur {
            if let Some(outs) = by_key.get(xi) {
                for o in outs {
                    let e = next.entry((x1.clone(), o.clone())).or_default();
                    *e = e.saturating_add(*m);
                }
            }
        }
        spec.out_j.push(next.values().fold(0u64, |a, &b| a.saturating_add(b)));
        spec.out_p.push(next.len() as u64);
        cur = next;
    }
    Ok(spec)
}

/// A chain described by a text manifest:
///
/// ```text
/// # comment
/// table r1.tsv
/// table r2.tsv
/// out_j 2 1200
/// out_p 2 300
/// ```
///
/// Table paths are relative to the manifest. `out_j i n` and `out_p i n`
/// override the cardinalities of join `i`; joins without overrides use exact
/// counts. An optional `k n` line is checked against the table count.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub tables: Vec<PathBuf>,
    pub out_j: Vec<(usize, u64)>,
    pub out_p: Vec<(usize, u64)>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self> {
        let mut m = Manifest {
            tables: Vec::new(),
            out_j: Vec::new(),
            out_p: Vec::new(),
        };
        let mut k = None;
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let num = |s: &str| s.parse::<u64>().map_err(|_| err(n, format!("not a number: {s:?}")));
            match fields.as_slice() {
                ["k", v] => k = Some(num(v)? as usize),
                ["table", p] => m.tables.push(base.join(p)),
                ["out_j", i, v] => m.out_j.push((num(i)? as usize, num(v)?)),
                ["out_p", i, v] => m.out_p.push((num(i)? as usize, num(v)?)),
                _ => return Err(err(n, format!("unrecognized line {line:?}"))),
            }
        }
        if let Some(k) = k {
            if k != m.tables.len() {
                return Err(err(0, format!("k = {k} but {} tables listed", m.tables.len())));
            }
        }
        if m.tables.len() < 2 {
            return Err(err(0, "a chain needs at least two tables".into()));
        }
        for &(i, _) in m.out_j.iter().chain(&m.out_p) {
            if i < 2 || i > m.tables.len() {
                return Err(err(0, format!("override for join {i} is out of range")));
            }
        }
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")), path)
    }

    pub fn load_tables(&self) -> Result<Vec<RawTable>> {
        self.tables
            .iter()
            .map(|p| load_edge_list(p, LoadOptions::new(EdgeFormat::from_path(p))))
            .collect()
    }

    /// Exact cardinalities with this manifest's overrides applied.
    pub fn spec(&self, tables: &[RawTable]) -> Result<ChainSpec> {
        let mut spec = exact_spec(tables)?;
        for &(i, v) in &self.out_j {
            spec.out_j[i - 1] = v;
        }
        for &(i, v) in &self.out_p {
            spec.out_p[i - 1] = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn spec_strategy() -> impl Strategy<Value = ChainSpec> {
        (2usize..=10)
            .prop_flat_map(|k| {
                (
                    proptest::collection::vec(1u64..100_000, k),
                    proptest::collection::vec((1u64..1_000_000, 0.0f64..=1.0), k),
                )
            })
            .prop_map(|(sizes, joins)| {
                let mut out_j = vec![sizes[0]];
                let mut out_p = vec![sizes[0]];
                for &(j, frac) in &joins[1..] {
                    out_j.push(j);
                    out_p.push(((j as f64 * frac) as u64).max(1));
                }
                ChainSpec { sizes, out_j, out_p }
            })
    }

    proptest! {
        #[test]
        fn dp_matches_exhaustive(spec in spec_strategy()) {
            let c = CostConstants::reference();
            let dp = dp_plan(&spec, &c).unwrap();
            let ex = exhaustive_plan(&spec, &c).unwrap();
            prop_assert!((dp.est_cost - ex.est_cost).abs() <= 1e-9 * ex.est_cost.abs().max(1e-12));
            prop_assert!((plan_cost(&spec, &dp.dedup_positions, &c) - dp.est_cost).abs() <= 1e-9 * dp.est_cost.abs().max(1e-12));
            let eager = plan_for(&spec, PlanStrategy::Eager, &c).unwrap().est_cost;
            let lazy = plan_for(&spec, PlanStrategy::Lazy, &c).unwrap().est_cost;
            prop_assert!(dp.est_cost <= eager.min(lazy) * (1.0 + 1e-12));
        }
    }

    #[test]
    fn two_tables_is_one_join_project() {
        let spec = ChainSpec { sizes: vec![10, 20], out_j: vec![10, 50], out_p: vec![10, 30] };
        let c = CostConstants::reference();
        let p = dp_plan(&spec, &c).unwrap();
        assert_eq!(p.dedup_positions, vec![2]);
        assert_eq!(p.est_cost, jp_cost(&spec, 1, 2, &c));
    }

    #[test]
    fn no_shrinkage_means_lazy() {
        let spec = ChainSpec {
            sizes: vec![100, 100, 100, 100],
            out_j: vec![100, 1000, 5000, 9000],
            out_p: vec![100, 1000, 5000, 9000],
        };
        let p = dp_plan(&spec, &CostConstants::reference()).unwrap();
        assert_eq!(p.dedup_positions, vec![4]);
    }

    fn set(r: &ResultSet) -> BTreeSet<(Value, Value)> {
        r.raw_pairs().into_iter().collect()
    }

    #[test]
    fn every_placement_gives_the_same_answer() {
        let tables: Vec<RawTable> = (0..4)
            .map(|i| crate::datagen::gen_uniform(150, 12, 40 + i).unwrap())
            .collect();
        let c = CostConstants::reference();
        let cfg = EngineConfig::default();
        let mut answers = Vec::new();
        for mask in 0..4 {
            let mut positions: Vec<usize> = (2..4).filter(|p| mask >> (p - 2) & 1 == 1).collect();
            positions.push(4);
            let plan = ChainPlan { dedup_positions: positions, est_cost: 0.0 };
            answers.push(set(&execute_plan(&tables, &plan, &cfg, &c).unwrap()));
        }
        assert!(answers.windows(2).all(|w| w[0] == w[1]));
        let spec = exact_spec(&tables).unwrap();
        assert_eq!(spec.out_p[3], answers[0].len() as u64);
    }

    #[test]
    fn exact_spec_counts_bags() {
        let r1 = RawTable::from_pairs(&[(0, 1), (0, 2)]);
        let r2 = RawTable::from_pairs(&[(1, 5), (2, 5), (2, 6)]);
        let spec = exact_spec(&[r1, r2]).unwrap();
        assert_eq!(spec.out_j, vec![2, 3]);
        assert_eq!(spec.out_p, vec![2, 2]);
    }

    #[test]
    fn manifest_parsing() {
        let text = "# chain\nk 3\ntable a.tsv\ntable b.tsv\ntable c.tsv\nout_j 2 100\nout_p 3 7\n";
        let m = Manifest::parse(text, Path::new("/data"), Path::new("m.txt")).unwrap();
        assert_eq!(m.tables[1], PathBuf::from("/data/b.tsv"));
        assert_eq!(m.out_j, vec![(2, 100)]);
        assert_eq!(m.out_p, vec![(3, 7)]);
        assert!(Manifest::parse("k 2\ntable a\n", Path::new("."), Path::new("m")).is_err());
        assert!(Manifest::parse("table a\ntable b\nout_j 1 5\n", Path::new("."), Path::new("m")).is_err());
        assert!(Manifest::parse("table a\nbogus\n", Path::new("."), Path::new("m")).is_err());
    }
}
