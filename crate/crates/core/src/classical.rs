//! Hash join followed by hash-based duplicate elimination, on raw values.

use crate::error::{Error, Result};
use crate::hash::{FastMap, FastSet};
use crate::mapping::{unify, EMPTY};
use crate::relation::{with_keys, Keys, RawTable};

#[derive(Debug, Clone, Copy)]
pub struct ClassicalOptions {
    /// Upper bound on the dedup table, in bytes.
    pub memory_budget: u64,
    /// Keep representative row pairs; otherwise only count.
    pub materialize: bool,
}

impl Default for ClassicalOptions {
    fn default() -> Self {
        ClassicalOptions {
            memory_budget: u64::MAX,
            materialize: true,
        }
    }
}

/// Distinct `(x, z)` results as `(R row, S row)` representatives.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JoinOutput {
    pub pairs: Vec<(u32, u32)>,
    pub count: u64,
    /// Join tuples produced before deduplication.
    pub out_j: u64,
}

struct Dedup<'a, X: Keys, Z: Keys> {
    x: &'a X,
    z: &'a Z,
    set: FastSet<(X::Key<'a>, Z::Key<'a>)>,
    out: JoinOutput,
    opts: ClassicalOptions,
}

impl<'a, X: Keys, Z: Keys> Dedup<'a, X, Z> {
    fn new(x: &'a X, z: &'a Z, opts: ClassicalOptions) -> Self {
        Dedup {
            x,
            z,
            set: FastSet::default(),
            out: JoinOutput::default(),
            opts,
        }
    }

    #[inline]
    fn add(&mut self, r_row: u32, s_row: u32) -> Result<()> {
        self.out.out_j += 1;
        if self.set.len() == self.set.capacity() {
            let entry = std::mem::size_of::<(X::Key<'a>, Z::Key<'a>)>() + 1;
            let next = (self.set.capacity().max(4) * 2 * entry) as u64;
            if next > self.opts.memory_budget {
                return Err(Error::Resource(format!(
                    "dedup table would need {next} bytes, budget is {}",
                    self.opts.memory_budget
                )));
            }
        }
        let key = (self.x.key(r_row as usize), self.z.key(s_row as usize));
        if self.set.insert(key) {
            self.out.count += 1;
            if self.opts.materialize {
                self.out.pairs.push((r_row, s_row));
            }
        }
        Ok(())
    }
}

/// `Π_{x,z}(R ⋈_y S)` without any mapping. The smaller table is the build side.
pub fn hash_join_dedup(r: &RawTable, s: &RawTable, opts: &ClassicalOptions) -> Result<JoinOutput> {
    let (ry, sy) = unify(r.right(), s.right());
    let build_s = s.len() <= r.len();
    with_keys!(r.left().as_ref(), x => with_keys!(s.left().as_ref(), z => {
        let mut d = Dedup::new(x, z, *opts);
        match (ry.as_ref(), sy.as_ref()) {
            (crate::relation::Column::Int(a), crate::relation::Column::Int(b)) => {
                join_on(a, b, build_s, &mut d)?
            }
            (crate::relation::Column::Bytes(a), crate::relation::Column::Bytes(b)) => {
                join_on(a, b, build_s, &mut d)?
            }
            _ => unreachable!("join keys unified above"),
        }
        Ok(d.out)
    }))
}

fn join_on<Y: Keys, X: Keys, Z: Keys>(
    ry: &Y,
    sy: &Y,
    build_s: bool,
    d: &mut Dedup<'_, X, Z>,
) -> Result<()> {
    let (build, probe) = if build_s { (sy, ry) } else { (ry, sy) };
    // chained buckets: head per key, `next` links rows
    let mut head: FastMap<Y::Key<'_>, u32> = FastMap::default();
    head.reserve(build.len());
    let mut next = vec![EMPTY; build.len()];
    for i in 0..build.len() {
        let slot = head.entry(build.key(i)).or_insert(EMPTY);
        next[i] = *slot;
        *slot = i as u32;
    }
    for p in 0..probe.len() {
        let Some(&first) = head.get(&probe.key(p)) else {
            continue;
        };
        let mut b = first;
        while b != EMPTY {
            if build_s {
                d.add(p as u32, b)?;
            } else {
                d.add(b, p as u32)?;
            }
            b = next[b as usize];
        }
    }
    Ok(())
}

/// Row indices grouped by code: rows with code `c` are
/// `rows[start[c]..start[c + 1]]`.
fn bucket_rows(codes: &[u32], n: usize) -> (Vec<u32>, Vec<u32>) {
    let mut start = vec![0u32; n + 1];
    for &c in codes {
        start[c as usize + 1] += 1;
    }
    for i in 0..n {
        start[i + 1] += start[i];
    }
    let mut fill = start.clone();
    let mut rows = vec![0u32; codes.len()];
    for (i, &c) in codes.iter().enumerate() {
        rows[fill[c as usize] as usize] = i as u32;
        fill[c as usize] += 1;
    }
    (start, rows)
}

/// The same join when both sides already carry dense join-key codes
/// (`EMPTY` for `R` rows without a partner); `S` rows are bucketed by code.
pub fn join_dedup_keyed(
    r: &RawTable,
    s: &RawTable,
    r_y: &[u32],
    s_y: &[u32],
    n_y: usize,
    opts: &ClassicalOptions,
) -> Result<JoinOutput> {
    let (start, rows) = bucket_rows(s_y, n_y);
    with_keys!(r.left().as_ref(), x => with_keys!(s.left().as_ref(), z => {
        let mut d = Dedup::new(x, z, *opts);
        for (ri, &y) in r_y.iter().enumerate() {
            if y == EMPTY {
                continue;
            }
            let y = y as usize;
            for &si in &rows[start[y] as usize..start[y + 1] as usize] {
                d.add(ri as u32, si)?;
            }
        }
        Ok(d.out)
    }))
}

/// The bag join `R ⋈ S` as `(R row, S row)` pairs, duplicates kept. Fails
/// once the pair buffer would pass `memory_budget` bytes.
pub fn join_bag(r: &RawTable, s: &RawTable, memory_budget: u64) -> Result<Vec<(u32, u32)>> {
    let y = crate::mapping::map_join_key(r, s, &crate::mapping::MapOptions::default())?;
    let (n, _) = y.join_size();
    let bytes = n.saturating_mul(8);
    if bytes > memory_budget {
        return Err(Error::Resource(format!(
            "bag join needs {bytes} bytes, budget is {memory_budget}"
        )));
    }
    let (start, rows) = bucket_rows(&y.s_y, y.dict.len());
    let mut out = Vec::with_capacity(n as usize);
    for (ri, &c) in y.r_y.iter().enumerate() {
        if c != EMPTY {
            let c = c as usize;
            out.extend(rows[start[c] as usize..start[c + 1] as usize].iter().map(|&si| (ri as u32, si)));
        }
    }
    Ok(out)
}
