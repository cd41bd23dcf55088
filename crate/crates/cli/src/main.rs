use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dim3::cache::{join_project_with_cache, populate_cache, CacheStore};
use dim3::costmodel::{calibrate_with, CalibrationOptions};
use dim3::datagen::{gen_rmat, gen_uniform, gen_zipf, ZipfColumns, GRAPH500};
use dim3::engine::{join_aggregate_both, join_aggregate_one, run, Agg, JoinRun};
use dim3::planner::{execute_plan, plan_for, Manifest, PlanStrategy};
use dim3::relation::{load_edge_list, load_valued_edge_list, write_edge_list, EdgeFormat, LoadOptions};
use dim3::{CostConstants, EngineConfig, Error, RawTable, Result, Strategy};

mod alloc;
mod bench;

#[global_allocator]
static GLOBAL: alloc::Counting = alloc::Counting;

#[derive(Parser)]
#[command(name = "dim3", version, about = "Density-adaptive join-project engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Measure the cost constants of this machine.
    Calibrate {
        #[arg(short, long)]
        out: PathBuf,
        /// Working set of the memory benchmarks, in MiB.
        #[arg(long, default_value_t = 256)]
        sample_mib: usize,
        #[arg(long, default_value_t = 5)]
        runs: usize,
    },
    /// Distinct (x, z) pairs of R(x,y) joined with S(z,y).
    JoinProject(JoinArgs),
    /// Write a synthetic edge list.
    Generate {
        #[command(subcommand)]
        kind: GenKind,
        #[arg(short, long, global = true)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1, global = true)]
        seed: u64,
    },
    /// Run an experiment suite and write a CSV.
    Bench {
        suite: bench::Suite,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        tuples: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Skip forced dense runs on instances with more x-by-z cells.
        #[arg(long, default_value_t = 2_000_000_000)]
        max_dense_cells: u64,
        #[command(flatten)]
        consts: ConstsArg,
    },
    /// Plan and run a chain of joins with projection.
    PlanMjp {
        manifest: PathBuf,
        #[arg(long, default_value = "dp")]
        strategy: PlanStrategy,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[command(flatten)]
        consts: ConstsArg,
    },
    /// Group-by aggregate over a join.
    Aggregate(AggArgs),
}

#[derive(Args)]
struct ConstsArg {
    /// Constants file written by `calibrate`.
    #[arg(long, env = "DIM3_CONSTS")]
    consts: Option<PathBuf>,
}

impl ConstsArg {
    fn load(&self) -> Result<CostConstants> {
        match &self.consts {
            Some(p) => CostConstants::load(p),
            None => {
                eprintln!("note: no constants file given, using reference constants");
                Ok(CostConstants::reference())
            }
        }
    }
}

#[derive(Args)]
struct InputArgs {
    r: PathBuf,
    s: PathBuf,
    /// Input format; guessed from the extension when absent.
    #[arg(long)]
    format: Option<Format>,
    /// Skip the first line of text inputs.
    #[arg(long)]
    header: bool,
}

impl InputArgs {
    fn opts(&self, path: &Path) -> LoadOptions {
        LoadOptions {
            format: self.format.map_or_else(|| EdgeFormat::from_path(path), Format::edge),
            header: self.header,
        }
    }

    fn load(&self) -> Result<(RawTable, RawTable)> {
        let r = load_edge_list(&self.r, self.opts(&self.r))?;
        let s = load_edge_list(&self.s, self.opts(&self.s))?;
        Ok((r, s))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Tsv,
    Csv,
    Bin,
}

impl Format {
    fn edge(self) -> EdgeFormat {
        match self {
            Format::Tsv => EdgeFormat::Tsv,
            Format::Csv => EdgeFormat::Csv,
            Format::Bin => EdgeFormat::BinaryU64Pairs,
        }
    }
}

#[derive(Args)]
struct JoinArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    consts: ConstsArg,
    #[arg(long)]
    force: Option<Strategy>,
    /// Cache file to read, and to write when `--cache-budget` is given.
    #[arg(long)]
    cache_store: Option<PathBuf>,
    /// Id slots to fill when populating the cache store.
    #[arg(long, requires = "cache_store")]
    cache_budget: Option<u64>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Write the key=value report here instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Print the report as JSON.
    #[arg(long)]
    json: bool,
    /// Only count the result (the default unless `--out` is given).
    #[arg(long, conflicts_with = "out")]
    count_only: bool,
    /// Write the result pairs to this file (format from the extension).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Memory budget in bytes.
    #[arg(long)]
    memory_budget: Option<u64>,
}

#[derive(Subcommand)]
enum GenKind {
    Uniform {
        #[arg(long)]
        tuples: usize,
        #[arg(long)]
        n_max: u64,
    },
    Zipf {
        #[arg(long)]
        tuples: usize,
        #[arg(long)]
        n_max: u64,
        #[arg(long)]
        alpha: f64,
        #[arg(long, value_enum, default_value = "left")]
        columns: Columns,
    },
    Rmat {
        #[arg(long)]
        log2_n: u32,
        #[arg(long)]
        edges: usize,
        /// Quadrant probabilities a,b,c,d.
        #[arg(long, value_delimiter = ',', num_args = 4, default_values_t = GRAPH500)]
        probs: Vec<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Columns {
    Both,
    Left,
    Right,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AggMode {
    /// Values on both sides, combined per join tuple.
    Both,
    /// Aggregate S's z per x.
    One,
}

#[derive(Clone, Copy, ValueEnum)]
enum Combine {
    Sum,
    Diff,
    Absdiff,
    Product,
    Left,
    Right,
}

impl Combine {
    fn apply(self, v: f64, u: f64) -> f64 {
        match self {
            Combine::Sum => v + u,
            Combine::Diff => v - u,
            Combine::Absdiff => (v - u).abs(),
            Combine::Product => v * u,
            Combine::Left => v,
            Combine::Right => u,
        }
    }
}

#[derive(Args)]
struct AggArgs {
    #[command(flatten)]
    input: InputArgs,
    #[command(flatten)]
    consts: ConstsArg,
    #[arg(long, value_enum, default_value = "both")]
    mode: AggMode,
    #[arg(long)]
    agg: Agg,
    /// How a pair of row values becomes one aggregated value.
    #[arg(long, value_enum, default_value = "absdiff")]
    combine: Combine,
    #[arg(long)]
    force: Option<Strategy>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Print only the number of groups.
    #[arg(long)]
    count_only: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Param(_) => 2,
        Error::Io { .. } | Error::Parse { .. } | Error::Constants(_) | Error::CacheInvalid(_) => 3,
        Error::Resource(_) | Error::CapacityExhausted(_) | Error::Calibration(_) => 4,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, source: io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source,
    }
}

fn calibrate(out: &Path, sample_mib: usize, runs: usize) -> Result<()> {
    let c = calibrate_with(&CalibrationOptions {
        sample_bytes: sample_mib << 20,
        runs,
        ..Default::default()
    })?;
    c.save(out)?;
    print!("{}", c.to_text());
    Ok(())
}

fn execute(a: &JoinArgs, r: &RawTable, s: &RawTable, c: &CostConstants) -> Result<JoinRun> {
    let populate = a.cache_budget.is_some();
    let mut cfg = EngineConfig {
        force_strategy: a.force,
        worker_count: a.threads,
        materialize: a.out.is_some() || populate,
        collect_cache_stats: populate,
        ..EngineConfig::default()
    };
    if let Some(b) = a.memory_budget {
        cfg.memory_budget = b;
    }
    let store = match (&a.cache_store, populate) {
        (Some(p), false) => Some(CacheStore::load(p)?),
        _ => None,
    };
    let out = match store {
        Some(store) => match join_project_with_cache(r, s, &store, &cfg, c) {
            Err(Error::CacheInvalid(msg)) => {
                eprintln!("warning: ignoring cache store: {msg}");
                run(r, s, &cfg, c)?
            }
            res => res?,
        },
        None => run(r, s, &cfg, c)?,
    };
    if let (Some(path), Some(budget)) = (&a.cache_store, a.cache_budget) {
        match populate_cache(&out, r, s, &cfg, budget, c) {
            Ok(store) => {
                store.save(path)?;
                eprintln!("cached {} z values in {} id slots", store.len(), store.space_used());
            }
            Err(Error::Param(msg)) => eprintln!("warning: cache not written: {msg}"),
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

fn join_project(a: &JoinArgs) -> Result<()> {
    let c = a.consts.load()?;
    let (r, s) = a.input.load()?;
    let out = execute(a, &r, &s, &c)?;
    if let Some(path) = &a.out {
        write_edge_list(&out.result.to_table()?, path, EdgeFormat::from_path(path))?;
    }
    let report = if a.json {
        out.report.to_json() + "\n"
    } else {
        out.report.to_text()
    };
    let mut stdout = io::stdout().lock();
    let w = |e| io_err(Path::new("<stdout>"), e);
    writeln!(stdout, "{}", out.result.len()).map_err(w)?;
    match &a.report {
        Some(path) => std::fs::write(path, report).map_err(|e| io_err(path, e))?,
        None => stdout.write_all(report.as_bytes()).map_err(w)?,
    }
    Ok(())
}

fn generate(kind: &GenKind, out: Option<&Path>, seed: u64) -> Result<()> {
    let out = out.ok_or_else(|| Error::Param("generate needs --out".into()))?;
    let t = match *kind {
        GenKind::Uniform { tuples, n_max } => gen_uniform(tuples, n_max, seed)?,
        GenKind::Zipf {
            tuples,
            n_max,
            alpha,
            columns,
        } => {
            let which = match columns {
                Columns::Both => ZipfColumns::Both,
                Columns::Left => ZipfColumns::Left,
                Columns::Right => ZipfColumns::Right,
            };
            gen_zipf(tuples, n_max, alpha, which, seed)?
        }
        GenKind::Rmat {
            log2_n,
            edges,
            ref probs,
        } => gen_rmat(log2_n, edges, [probs[0], probs[1], probs[2], probs[3]], seed)?,
    };
    write_edge_list(&t, out, EdgeFormat::from_path(out))
}

fn plan_mjp(manifest: &Path, strategy: PlanStrategy, threads: usize, consts: &ConstsArg) -> Result<()> {
    let c = consts.load()?;
    let m = Manifest::load(manifest)?;
    let tables = m.load_tables()?;
    let spec = m.spec(&tables)?;
    let plan = plan_for(&spec, strategy, &c)?;
    let cfg = EngineConfig {
        worker_count: threads,
        materialize: false,
        ..EngineConfig::default()
    };
    let t0 = Instant::now();
    let res = execute_plan(&tables, &plan, &cfg, &c)?;
    let secs = t0.elapsed().as_secs_f64();
    let positions: Vec<String> = plan.dedup_positions.iter().map(|p| p.to_string()).collect();
    println!("strategy={strategy}");
    println!("positions={}", positions.join(","));
    println!("est_cost={:e}", plan.est_cost);
    println!("out_p={}", res.len());
    println!("t_total={secs}");
    Ok(())
}

fn aggregate(a: &AggArgs) -> Result<()> {
    let c = a.consts.load()?;
    let cfg = EngineConfig {
        force_strategy: a.force,
        worker_count: a.threads,
        ..EngineConfig::default()
    };
    let mut lines: Vec<String> = Vec::new();
    let groups = match a.mode {
        AggMode::Both => {
            let opts = |p: &Path| a.input.opts(p);
            let (r, rv) = load_valued_edge_list(&a.input.r, opts(&a.input.r))?;
            let (s, sv) = load_valued_edge_list(&a.input.s, opts(&a.input.s))?;
            let combine = a.combine;
            let res = join_aggregate_both(&r, &rv, &s, &sv, move |v, u| combine.apply(v, u), a.agg, &cfg, &c)?;
            if !a.count_only {
                let vals = res.aggregates().unwrap_or_default();
                for (i, v) in vals.iter().enumerate() {
                    let (x, z) = res.raw_pair(i);
                    lines.push(format!("{x}\t{z}\t{v}"));
                }
            }
            res.len() as usize
        }
        AggMode::One => {
            let (r, s) = a.input.load()?;
            let rows = join_aggregate_one(&r, &s, a.agg, &cfg)?;
            if !a.count_only {
                lines.extend(rows.iter().map(|(x, v)| format!("{x}\t{v}")));
            }
            rows.len()
        }
    };
    if a.count_only {
        println!("{groups}");
        return Ok(());
    }
    let (path, mut w): (PathBuf, Box<dyn Write>) = match &a.out {
        Some(p) => (p.clone(), Box::new(create(p)?)),
        None => (PathBuf::from("<stdout>"), Box::new(BufWriter::new(io::stdout().lock()))),
    };
    for l in &lines {
        writeln!(w, "{l}").map_err(|e| io_err(&path, e))?;
    }
    w.flush().map_err(|e| io_err(&path, e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Calibrate {
            out,
            sample_mib,
            runs,
        } => calibrate(out, *sample_mib, *runs),
        Cmd::JoinProject(a) => join_project(a),
        Cmd::Generate { kind, out, seed } => generate(kind, out.as_deref(), *seed),
        Cmd::Bench {
            suite,
            out,
            tuples,
            repeats,
            seed,
            threads,
            max_dense_cells,
            consts,
        } => consts.load().and_then(|c| {
            let opts = bench::BenchOptions {
                tuples: *tuples,
                repeats: *repeats,
                seed: *seed,
                threads: *threads,
                max_dense_cells: *max_dense_cells,
            };
            let csv = bench::bench(*suite, &opts, &c)?;
            std::fs::write(out, csv).map_err(|e| io_err(out, e))
        }),
        Cmd::PlanMjp {
            manifest,
            strategy,
            threads,
            consts,
        } => plan_mjp(manifest, *strategy, *threads, consts),
        Cmd::Aggregate(a) => aggregate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
