//! Microbenchmarks behind the time constants. Each constant is the median of
//! several runs of one benchmark, divided by the operations it performed.

use std::collections::HashMap;
use std::hint::black_box;
use std::time::{Duration, Instant};

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{CostConstants, DEFAULT_W};
use crate::datagen::below;
use crate::denseec::{block_and_any_counted, padded_words, probe_any_counted};
use crate::error::{Error, Result};
use crate::mapping::{encode_column, MapOptions};
use crate::relation::Column;

#[derive(Debug, Clone, Copy)]
pub struct CalibrationOptions {
    /// Working set of the memory benchmarks.
    pub sample_bytes: usize,
    pub runs: usize,
    pub seed: u64,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions {
            sample_bytes: 256 << 20,
            runs: 5,
            seed: 0x5eed,
        }
    }
}

pub fn calibrate(sample_bytes: usize) -> Result<CostConstants> {
    calibrate_with(&CalibrationOptions {
        sample_bytes,
        ..Default::default()
    })
}

/// Smallest run the timer must resolve into at least this many ticks.
const MIN_TICKS: u32 = 100;

fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..20 {
        let t0 = Instant::now();
        let mut t1 = Instant::now();
        while t1 == t0 {
            t1 = Instant::now();
        }
        best = best.min(t1 - t0);
    }
    best
}

/// Median seconds per operation of `f`, which returns its operation count.
fn median_per_op(runs: usize, res: Duration, name: &str, mut f: impl FnMut() -> u64) -> Result<f64> {
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs.max(1) {
        let t0 = Instant::now();
        let ops = f();
        let dt = t0.elapsed();
        if dt < res * MIN_TICKS {
            return Err(Error::Calibration(format!(
                "{name}: run took {dt:?}, under {MIN_TICKS} timer ticks of {res:?}"
            )));
        }
        samples.push(dt.as_secs_f64() / ops.max(1) as f64);
    }
    samples.sort_by(f64::total_cmp);
    Ok(samples[samples.len() / 2])
}

/// A random single cycle over `0..n` (Sattolo's algorithm).
fn cycle(n: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    let mut p: Vec<u32> = (0..n as u32).collect();
    for i in (1..n).rev() {
        let j = below(rng, i as u64) as usize;
        p.swap(i, j);
    }
    let mut next = vec![0u32; n];
    for i in 0..n {
        next[p[i] as usize] = p[(i + 1) % n];
    }
    next
}

pub fn calibrate_with(opts: &CalibrationOptions) -> Result<CostConstants> {
    let res = timer_resolution();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let runs = opts.runs;
    let n = (opts.sample_bytes / 8).max(1 << 12);

    let seq: Vec<u64> = (0..n as u64).collect();
    let t_seq_r = median_per_op(runs, res, "t_seqR", || {
        let mut acc = 0u64;
        for &v in black_box(&seq) {
            acc = acc.wrapping_add(v);
        }
        black_box(acc);
        n as u64
    })?;
    drop(seq);

    let steps = n.min(1 << 22);
    let next = cycle(n, &mut rng);
    let t_rand_r = median_per_op(runs, res, "t_randR", || {
        let mut i = 0u32;
        for _ in 0..steps {
            i = next[i as usize];
        }
        black_box(i);
        steps as u64
    })?;

    // low half: successor, high half: a counter bumped on every visit
    let mut rw: Vec<u64> = next.iter().map(|&v| v as u64).collect();
    drop(next);
    let t_rand_rw = median_per_op(runs, res, "t_randRW", || {
        let mut i = 0usize;
        for _ in 0..steps {
            let v = rw[i];
            rw[i] = v.wrapping_add(1 << 32);
            i = v as u32 as usize;
        }
        black_box(i);
        steps as u64
    })?;
    drop(rw);

    // general-purpose hash table, lookups chained through the stored values
    let entries = (n / 4).max(1 << 10);
    let keys: Vec<u64> = (0..entries).map(|_| rng.next_u64()).collect();
    let order = cycle(entries, &mut rng);
    let map: HashMap<u64, u64> = (0..entries)
        .map(|i| (keys[i], keys[order[i] as usize]))
        .collect();
    drop(order);
    let hash_steps = steps.min(entries * 4);
    let t_hash = median_per_op(runs, res, "t_hash", || {
        let mut k = keys[0];
        for _ in 0..hash_steps {
            k = map[&k];
        }
        black_box(k);
        hash_steps as u64
    })?;
    drop(map);

    // the mapping path itself, on a column with about half distinct values
    let col = Column::Int((0..entries).map(|i| keys[i / 2 * 2]).collect());
    drop(keys);
    let map_opts = MapOptions::hashed();
    let t_map = median_per_op(runs, res, "t_map", || {
        let e = encode_column(&col, None, Some(false), &map_opts).expect("calibration column fits");
        black_box(e.codes.len()) as u64
    })?;
    drop(col);

    let (t_ec_s, t_ec_d) = dense_check_costs(runs, res, &mut rng)?;

    let c = CostConstants {
        t_seq_r,
        t_rand_r: t_rand_r.max(t_seq_r),
        t_rand_rw: t_rand_rw.max(t_rand_r).max(t_seq_r),
        t_hash,
        t_map,
        t_ec_s,
        t_ec_d,
        w: DEFAULT_W,
    };
    c.validate()?;
    Ok(c)
}

/// Per-probe and per-block costs measured with the dense kernel's own check
/// functions over a cache-resident panel.
fn dense_check_costs(runs: usize, res: Duration, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    const Y: usize = 4096;
    const ROWS: usize = 256;
    let words = padded_words(Y, DEFAULT_W);
    // sparse enough that most checks run to completion
    let mut panel = vec![0u64; ROWS * words];
    for row in panel.chunks_mut(words) {
        for _ in 0..8 {
            let y = below(rng, Y as u64) as usize;
            row[y / 64] |= 1 << (y % 64);
        }
    }
    let mut ys: Vec<u32> = (0..64).map(|_| below(rng, Y as u64) as u32).collect();
    ys.sort_unstable();
    ys.dedup();
    let mut bx = vec![0u64; words];
    for &y in &ys {
        bx[y as usize / 64] |= 1 << (y % 64);
    }
    let reps = 64;
    let t_ec_s = median_per_op(runs, res, "t_ECs", || {
        let mut probes = 0;
        for _ in 0..reps {
            for row in black_box(&panel).chunks(words) {
                let (hit, n) = probe_any_counted(black_box(&ys), row);
                probes += n;
                black_box(hit);
            }
        }
        probes
    })?;
    let t_ec_d = median_per_op(runs, res, "t_ECd", || {
        let mut blocks = 0;
        for _ in 0..reps {
            for row in black_box(&panel).chunks(words) {
                let (hit, n) = block_and_any_counted(black_box(&bx), row, DEFAULT_W);
                blocks += n;
                black_box(hit);
            }
        }
        blocks
    })?;
    Ok((t_ec_s, t_ec_d))
}
