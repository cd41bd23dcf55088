//! Per-`z` result caching.
//!
//! A cached `z` is left out of both kernels and its `x` partners are replayed
//! from the store. Each entry keeps either the `k` partners or, when
//! `k > |X|/2`, the `|X| - k` non-partners, so an entry never holds more than
//! `|X|/2` ids. Entries are chosen greedily by work saved per id slot.
//!
//! Codes are only meaningful for the inputs and mapping options they were
//! produced with, so a store carries a fingerprint of both and refuses to
//! serve anything else.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::costmodel::CostConstants;
use crate::engine::{orient, run_inner, EngineConfig, JoinRun, Prepared, Provenance};
use crate::error::{Error, Result};
use crate::hash::{mix64, FastMap};
use crate::mapping::MapOptions;
use crate::relation::RawTable;
use crate::sink::ZCostStats;

/// Id slots an entry with `k` partners occupies, header included.
pub fn space(k: u64, x_card: u64) -> u64 {
    2 + k.min(x_card.saturating_sub(k))
}

/// Estimated kernel time saved per id slot by caching this `z`.
pub fn cache_score(s: &ZCostStats, x_card: u64, c: &CostConstants) -> f64 {
    let cost = s.n_sparse as f64 * (c.t_seq_r + c.t_rand_rw)
        + s.n_simd as f64 * c.t_ec_d
        + s.n_nonsimd as f64 * c.t_ec_s;
    cost / space(s.k, x_card) as f64
}

/// `(z, score)` for every `z`, best first; ties keep `z` order.
pub fn ranked(stats: &[ZCostStats], x_card: u64, c: &CostConstants) -> Vec<(u32, f64)> {
    let mut v: Vec<(u32, f64)> = stats
        .iter()
        .enumerate()
        .map(|(z, s)| (z as u32, cache_score(s, x_card, c)))
        .collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// Budget that fits the best-scoring `frac` of the cacheable `z` values
/// (positive score, at least one partner).
pub fn top_fraction_budget(stats: &[ZCostStats], x_card: u64, frac: f64, c: &CostConstants) -> u64 {
    let eligible: Vec<u64> = ranked(stats, x_card, c)
        .into_iter()
        .filter(|&(z, score)| score > 0.0 && stats[z as usize].k > 0)
        .map(|(z, _)| space(stats[z as usize].k, x_card))
        .collect();
    let take = (eligible.len() as f64 * frac.clamp(0.0, 1.0)).ceil() as usize;
    eligible[..take].iter().sum()
}

/// One cached `z`. `size > 0` means `ids` are the partners; `size <= 0`
/// means `ids` are the `-size` codes that are not partners. A `z` without
/// partners cannot be represented and is never cached.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub z: u32,
    pub size: i64,
    pub ids: Vec<u32>,
}

impl CacheEntry {
    /// `xs` must be sorted, distinct, nonempty and below `x_card`.
    pub fn encode(z: u32, xs: &[u32], x_card: u32) -> Result<Self> {
        if xs.is_empty() {
            return Err(Error::Param(format!("z={z} has no partners to cache")));
        }
        debug_assert!(xs.windows(2).all(|w| w[0] < w[1]));
        debug_assert!(xs.last().is_some_and(|&x| x < x_card));
        let k = xs.len() as u64;
        if 2 * k > x_card as u64 {
            let mut ids = Vec::with_capacity(x_card as usize - xs.len());
            let mut next = xs.iter().peekable();
            for x in 0..x_card {
                if next.peek() == Some(&&x) {
                    next.next();
                } else {
                    ids.push(x);
                }
            }
            Ok(CacheEntry {
                z,
                size: k as i64 - x_card as i64,
                ids,
            })
        } else {
            Ok(CacheEntry {
                z,
                size: k as i64,
                ids: xs.to_vec(),
            })
        }
    }

    pub fn is_complement(&self) -> bool {
        self.size <= 0
    }

    /// Number of partners.
    pub fn k(&self, x_card: u32) -> u64 {
        if self.is_complement() {
            (x_card as i64 + self.size) as u64
        } else {
            self.size as u64
        }
    }

    pub fn for_each(&self, x_card: u32, mut f: impl FnMut(u32)) {
        if !self.is_complement() {
            self.ids.iter().for_each(|&x| f(x));
            return;
        }
        let mut skip = self.ids.iter().peekable();
        for x in 0..x_card {
            if skip.peek() == Some(&&x) {
                skip.next();
            } else {
                f(x);
            }
        }
    }

    pub fn decode(&self, x_card: u32) -> Vec<u32> {
        let mut out = Vec::with_capacity(self.k(x_card) as usize);
        self.for_each(x_card, |x| out.push(x));
        out
    }
}

/// Cached entries for one pair of inputs, in internal code space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheStore {
    fingerprint: u64,
    x_card: u32,
    z_card: u32,
    entries: Vec<CacheEntry>,
    by_z: FastMap<u32, usize>,
}

impl CacheStore {
    pub fn new(fingerprint: u64, x_card: u32, z_card: u32, mut entries: Vec<CacheEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.z);
        let mut by_z = FastMap::default();
        for (i, e) in entries.iter().enumerate() {
            if e.z >= z_card || e.ids.iter().any(|&x| x >= x_card) {
                return Err(Error::CacheInvalid(format!("entry for z={} is out of range", e.z)));
            }
            let k = e.size.unsigned_abs();
            let well_formed = e.ids.len() as u64 == k
                && e.ids.windows(2).all(|w| w[0] < w[1])
                && if e.is_complement() {
                    2 * (x_card as u64 - k.min(x_card as u64)) > x_card as u64
                } else {
                    2 * k <= x_card as u64
                };
            if !well_formed {
                return Err(Error::CacheInvalid(format!("entry for z={} is malformed", e.z)));
            }
            if by_z.insert(e.z, i).is_some() {
                return Err(Error::CacheInvalid(format!("z={} cached twice", e.z)));
            }
        }
        Ok(CacheStore {
            fingerprint,
            x_card,
            z_card,
            entries,
            by_z,
        })
    }

    /// Identifies the inputs and the options that fix their codes.
    pub fn fingerprint_of(r: &RawTable, s: &RawTable, map: &MapOptions) -> u64 {
        let (r, s, _) = orient(r, s);
        let mut h = mix64(r.fingerprint() ^ s.fingerprint().rotate_left(29));
        h = mix64(h ^ map.llc_bytes as u64);
        for (i, skip) in map.skip.iter().enumerate() {
            let v = match skip {
                None => 1,
                Some(false) => 2,
                Some(true) => 3,
            };
            h = mix64(h ^ (v << (8 * i)));
        }
        mix64(h ^ map.density.to_bits())
    }

    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    pub fn x_card(&self) -> u32 {
        self.x_card
    }

    pub fn z_card(&self) -> u32 {
        self.z_card
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    /// Id slots in use, in the units of [`space`].
    pub fn space_used(&self) -> u64 {
        self.entries.iter().map(|e| 2 + e.ids.len() as u64).sum()
    }

    pub(crate) fn k_of(&self, z: u32) -> Option<u64> {
        self.by_z.get(&z).map(|&i| self.entries[i].k(self.x_card))
    }

    pub(crate) fn mask_for(&self, p: &Prepared) -> Result<Vec<bool>> {
        if p.dims.x != self.x_card as usize || p.dims.z != self.z_card as usize {
            return Err(Error::CacheInvalid(format!(
                "store was built for |X|={} |Z|={}, inputs map to |X|={} |Z|={}",
                self.x_card, self.z_card, p.dims.x, p.dims.z
            )));
        }
        let mut mask = vec![false; self.z_card as usize];
        for e in &self.entries {
            mask[e.z as usize] = true;
        }
        Ok(mask)
    }

    /// Appends every cached `(x, z)` when `materialize`, and returns the count.
    pub(crate) fn decode_into(&self, pairs: &mut Vec<(u32, u32)>, materialize: bool) -> u64 {
        let mut n = 0;
        for e in &self.entries {
            if materialize {
                e.for_each(self.x_card, |x| pairs.push((x, e.z)));
            }
            n += e.k(self.x_card);
        }
        n
    }

    /// Little-endian: fingerprint, `|X|`, `|Z|`, entry count as `u64`, then
    /// per entry `z: u32`, `size: i64` and the ids as `u32`.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        for v in [
            self.fingerprint,
            self.x_card as u64,
            self.z_card as u64,
            self.entries.len() as u64,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for e in &self.entries {
            w.write_all(&e.z.to_le_bytes())?;
            w.write_all(&e.size.to_le_bytes())?;
            for &x in &e.ids {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |what: &str| Error::CacheInvalid(format!("store file: {what}"));
        let mut u64s = [0u64; 4];
        for v in &mut u64s {
            let mut b = [0u8; 8];
            r.read_exact(&mut b).map_err(|_| bad("truncated header"))?;
            *v = u64::from_le_bytes(b);
        }
        let [fingerprint, x_card, z_card, n] = u64s;
        if x_card > u32::MAX as u64 || z_card > u32::MAX as u64 || n > z_card {
            return Err(bad("header out of range"));
        }
        let mut entries = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let mut b4 = [0u8; 4];
            let mut b8 = [0u8; 8];
            r.read_exact(&mut b4).map_err(|_| bad("truncated entry"))?;
            r.read_exact(&mut b8).map_err(|_| bad("truncated entry"))?;
            let z = u32::from_le_bytes(b4);
            let size = i64::from_le_bytes(b8);
            let len = size.unsigned_abs();
            if len > x_card {
                return Err(bad("entry larger than X"));
            }
            let mut ids = vec![0u32; len as usize];
            for x in &mut ids {
                r.read_exact(&mut b4).map_err(|_| bad("truncated ids"))?;
                *x = u32::from_le_bytes(b4);
            }
            entries.push(CacheEntry { z, size, ids });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(|_| bad("unreadable"))? != 0 {
            return Err(bad("trailing bytes"));
        }
        CacheStore::new(fingerprint, x_card as u32, z_card as u32, entries)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f)).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

/// Fills a store from a materialized run made with `collect_cache_stats`,
/// taking `z` values by descending score until the next one does not fit in
/// `budget` id slots. `z` values with score zero or no partners are skipped.
pub fn populate_cache(
    run: &JoinRun,
    r: &RawTable,
    s: &RawTable,
    cfg: &EngineConfig,
    budget: u64,
    c: &CostConstants,
) -> Result<CacheStore> {
    let res = &run.result;
    if res.provenance() != Provenance::Mapped || !res.is_materialized() || run.z_stats.is_empty() {
        return Err(Error::Param(
            "populating a cache needs a materialized mapped run with cache stats".into(),
        ));
    }
    let x_card = run.report.x_card as u32;
    let z_card = run.z_stats.len() as u32;
    let mut partners: Vec<Vec<u32>> = vec![Vec::new(); z_card as usize];
    let mut chosen = vec![false; z_card as usize];
    let mut used = 0u64;
    for (z, score) in ranked(&run.z_stats, x_card as u64, c) {
        let k = run.z_stats[z as usize].k;
        if score <= 0.0 || k == 0 {
            continue;
        }
        let need = space(k, x_card as u64);
        if used + need > budget {
            break;
        }
        used += need;
        chosen[z as usize] = true;
    }
    for &(x, z) in res.internal_pairs() {
        if chosen[z as usize] {
            partners[z as usize].push(x);
        }
    }
    let mut entries = Vec::new();
    for (z, mut xs) in partners.into_iter().enumerate() {
        if chosen[z] {
            xs.sort_unstable();
            entries.push(CacheEntry::encode(z as u32, &xs, x_card)?);
        }
    }
    CacheStore::new(CacheStore::fingerprint_of(r, s, &cfg.map), x_card, z_card, entries)
}

/// A join-project that serves cached `z` values from `store` and computes the
/// rest with the hybrid kernels.
pub fn join_project_with_cache(
    r: &RawTable,
    s: &RawTable,
    store: &CacheStore,
    cfg: &EngineConfig,
    c: &CostConstants,
) -> Result<JoinRun> {
    let fp = CacheStore::fingerprint_of(r, s, &cfg.map);
    if fp != store.fingerprint {
        return Err(Error::CacheInvalid(format!(
            "fingerprint {fp:016x} differs from the store's {:016x}",
            store.fingerprint
        )));
    }
    run_inner(r, s, cfg, c, Some(store))
}
