use std::collections::HashSet;
use std::fmt::Write as _;
use std::time::Instant;

use clap::ValueEnum;
use dim3::cache::{join_project_with_cache, populate_cache, top_fraction_budget};
use dim3::datagen::{gen_rmat, gen_uniform, gen_zipf, ZipfColumns, GRAPH500};
use dim3::engine::run;
use dim3::{CostConstants, EngineConfig, Error, RawTable, Result, Strategy};

use crate::alloc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Crossing,
    ZipfSweep,
    RmatSweep,
    Caching,
}

pub struct BenchOptions {
    pub tuples: usize,
    pub repeats: usize,
    pub seed: u64,
    pub threads: usize,
    /// Forced dense runs whose `x` by `z` grid exceeds this are not executed.
    pub max_dense_cells: u64,
}

pub const HEADER: &str = "config,algorithm,seconds,out_j,out_p,peak_bytes";

struct Row {
    config: String,
    algorithm: String,
    seconds: Option<f64>,
    out_j: u64,
    out_p: u64,
    peak_bytes: usize,
}

impl Row {
    fn csv(&self, out: &mut String) {
        let secs = self.seconds.map_or("inf".to_string(), |s| format!("{s:.6}"));
        writeln!(
            out,
            "{},{},{},{},{},{}",
            self.config, self.algorithm, secs, self.out_j, self.out_p, self.peak_bytes
        )
        .unwrap();
    }
}

const ALGORITHMS: [(&str, Option<Strategy>); 4] = [
    ("dim3", None),
    ("classical", Some(Strategy::Classical)),
    ("sparse_only", Some(Strategy::SparseOnly)),
    ("dense_only", Some(Strategy::DenseOnly)),
];

fn distinct(t: &RawTable) -> u64 {
    match t.left().as_ints() {
        Some(v) => v.iter().collect::<HashSet<_>>().len() as u64,
        None => t.rows().map(|(a, _)| a).collect::<HashSet<_>>().len() as u64,
    }
}

/// Best-of-`repeats` count-only run; peak heap is measured on the first.
fn measure(
    config: &str,
    name: &str,
    r: &RawTable,
    s: &RawTable,
    cfg: &EngineConfig,
    opts: &BenchOptions,
    c: &CostConstants,
) -> Result<Row> {
    let mut best = f64::INFINITY;
    let mut row = None;
    for _ in 0..opts.repeats.max(1) {
        let base = alloc::reset_peak();
        let t0 = Instant::now();
        let out = run(r, s, cfg, c)?;
        best = best.min(t0.elapsed().as_secs_f64());
        let peak = alloc::peak().saturating_sub(base);
        row.get_or_insert(Row {
            config: config.to_string(),
            algorithm: name.to_string(),
            seconds: None,
            out_j: out.report.out_j,
            out_p: out.result.len(),
            peak_bytes: peak,
        });
    }
    let mut row = row.unwrap();
    row.seconds = Some(best);
    Ok(row)
}

fn compare(config: &str, r: &RawTable, s: &RawTable, opts: &BenchOptions, c: &CostConstants, out: &mut String) -> Result<()> {
    let cells = distinct(r).saturating_mul(distinct(s));
    let mut out_j = 0;
    for (name, strategy) in ALGORITHMS {
        let cfg = EngineConfig {
            force_strategy: strategy,
            worker_count: opts.threads,
            materialize: false,
            ..EngineConfig::default()
        };
        let row = if strategy == Some(Strategy::DenseOnly) && cells > opts.max_dense_cells {
            Row {
                config: config.to_string(),
                algorithm: name.to_string(),
                seconds: None,
                out_j,
                out_p: 0,
                peak_bytes: 0,
            }
        } else {
            match measure(config, name, r, s, &cfg, opts, c) {
                Ok(row) => row,
                Err(Error::Resource(msg)) => {
                    eprintln!("{config} {name}: {msg}");
                    Row {
                        config: config.to_string(),
                        algorithm: name.to_string(),
                        seconds: None,
                        out_j,
                        out_p: 0,
                        peak_bytes: 0,
                    }
                }
                Err(e) => return Err(e),
            }
        };
        out_j = row.out_j;
        row.csv(out);
        eprintln!("{config} {name} {}", row.seconds.map_or("skipped".into(), |s| format!("{s:.4}s")));
    }
    Ok(())
}

fn caching(opts: &BenchOptions, c: &CostConstants, out: &mut String) -> Result<()> {
    let n_max = 10_000;
    let r = gen_zipf(opts.tuples, n_max, 1.0, ZipfColumns::Left, opts.seed)?;
    let s = gen_zipf(opts.tuples, n_max, 1.0, ZipfColumns::Left, opts.seed + 1)?;
    let cfg = EngineConfig {
        force_strategy: Some(Strategy::Hybrid),
        worker_count: opts.threads,
        materialize: false,
        ..EngineConfig::default()
    };
    let uncached = measure("frac=0", "uncached", &r, &s, &cfg, opts, c)?;
    uncached.csv(out);
    let stats_cfg = EngineConfig {
        collect_cache_stats: true,
        materialize: true,
        ..cfg
    };
    let base = run(&r, &s, &stats_cfg, c)?;
    for frac in [0.1, 0.2, 0.5, 1.0] {
        let budget = top_fraction_budget(&base.z_stats, base.report.x_card, frac, c);
        let store = populate_cache(&base, &r, &s, &stats_cfg, budget, c)?;
        let config = format!("frac={frac}");
        let mut best = f64::INFINITY;
        let mut row = None;
        for _ in 0..opts.repeats.max(1) {
            let mem = alloc::reset_peak();
            let t0 = Instant::now();
            let res = join_project_with_cache(&r, &s, &store, &cfg, c)?;
            best = best.min(t0.elapsed().as_secs_f64());
            row.get_or_insert(Row {
                config: config.clone(),
                algorithm: "cached".into(),
                seconds: None,
                out_j: res.report.out_j,
                out_p: res.result.len(),
                peak_bytes: alloc::peak().saturating_sub(mem),
            });
        }
        let mut row = row.unwrap();
        row.seconds = Some(best);
        eprintln!("{config} cached {best:.4}s ({} entries)", store.len());
        row.csv(out);
    }
    Ok(())
}

pub fn bench(suite: Suite, opts: &BenchOptions, c: &CostConstants) -> Result<String> {
    let mut out = String::from(HEADER);
    out.push('\n');
    let t = opts.tuples;
    match suite {
        Suite::Crossing => {
            for n in [100u64, 1_000, 10_000, 100_000, 1_000_000] {
                let r = gen_uniform(t, n, opts.seed)?;
                let s = gen_uniform(t, n, opts.seed + 1)?;
                compare(&format!("n={n}"), &r, &s, opts, c, &mut out)?;
            }
        }
        Suite::ZipfSweep => {
            for alpha in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let r = gen_zipf(t, 10_000, alpha, ZipfColumns::Left, opts.seed)?;
                let s = gen_zipf(t, 10_000, alpha, ZipfColumns::Left, opts.seed + 1)?;
                compare(&format!("alpha={alpha}"), &r, &s, opts, c, &mut out)?;
            }
        }
        Suite::RmatSweep => {
            for log2_n in [10u32, 12, 14, 16] {
                let r = gen_rmat(log2_n, t, GRAPH500, opts.seed)?;
                let s = gen_rmat(log2_n, t, GRAPH500, opts.seed + 1)?;
                compare(&format!("log2_n={log2_n}"), &r, &s, opts, c, &mut out)?;
            }
        }
        Suite::Caching => caching(opts, c, &mut out)?,
    }
    Ok(out)
}
