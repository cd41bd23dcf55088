//! Dictionary encoding of raw columns into consecutive `u32` codes.
//!
//! The dictionary is an open-addressing table with linear probing. Probe runs
//! are capped; a value that finds no free slot within the cap goes to a small
//! overflow map keyed by the full hash. When the table would not fit in the
//! last-level cache, values are first split by the low bits of their hash and
//! each split gets its own table, so every build touches cache-resident memory.

use crate::error::{Error, Result};
use crate::hash::FastMap;
use crate::relation::{with_keys, ByteColumn, Column, Keys, MappedTable, RawTable, Value};

/// Marks an empty slot, and an absent code in lookup outputs.
pub const EMPTY: u32 = u32::MAX;
pub const MAX_PROBE: usize = 16;
pub const MAX_LOAD: f64 = 0.7;
pub const DEFAULT_LLC_BYTES: usize = 12 << 20;
/// Largest number of codes a dictionary may hand out (`EMPTY` is reserved).
pub const MAX_CODES: u64 = u32::MAX as u64;

const MIN_SLOTS: usize = 16;
const SAMPLE_ROWS: usize = 1 << 16;

#[derive(Debug, Clone, Copy)]
struct Slot {
    hash: u64,
    code: u32,
}

const VACANT: Slot = Slot {
    hash: 0,
    code: EMPTY,
};

#[derive(Debug, Clone)]
struct ProbeTable {
    slots: Vec<Slot>,
    /// Hash bits consumed by partition selection.
    shift: u32,
    len: usize,
    stash: FastMap<u64, Vec<u32>>,
}

impl ProbeTable {
    fn new(n_slots: usize, shift: u32) -> Self {
        ProbeTable {
            slots: vec![VACANT; n_slots.next_power_of_two().max(MIN_SLOTS)],
            shift,
            len: 0,
            stash: FastMap::default(),
        }
    }

    #[inline]
    fn home(&self, hash: u64) -> usize {
        (hash >> self.shift) as usize & (self.slots.len() - 1)
    }

    /// Finds the code of a present value; `eq` compares a candidate code.
    #[inline]
    fn find(&self, hash: u64, eq: impl Fn(u32) -> bool) -> Option<u32> {
        let mask = self.slots.len() - 1;
        let mut i = self.home(hash);
        for _ in 0..MAX_PROBE {
            let s = self.slots[i];
            if s.code == EMPTY {
                return None;
            }
            if s.hash == hash && eq(s.code) {
                return Some(s.code);
            }
            i = (i + 1) & mask;
        }
        self.stash
            .get(&hash)
            .and_then(|codes| codes.iter().copied().find(|&c| eq(c)))
    }

    /// Places a value known to be absent.
    fn place(&mut self, hash: u64, code: u32) {
        let mask = self.slots.len() - 1;
        let mut i = self.home(hash);
        for _ in 0..MAX_PROBE {
            if self.slots[i].code == EMPTY {
                self.slots[i] = Slot { hash, code };
                self.len += 1;
                return;
            }
            i = (i + 1) & mask;
        }
        self.stash.entry(hash).or_default().push(code);
    }

    fn needs_growth(&self) -> bool {
        (self.len + 1) as f64 > MAX_LOAD * self.slots.len() as f64
    }

    fn grow(&mut self) {
        let doubled = vec![VACANT; self.slots.len() * 2];
        let old = std::mem::replace(&mut self.slots, doubled);
        let stash = std::mem::take(&mut self.stash);
        self.len = 0;
        for s in old.into_iter().filter(|s| s.code != EMPTY) {
            self.place(s.hash, s.code);
        }
        for (h, codes) in stash {
            for c in codes {
                self.place(h, c);
            }
        }
    }

    fn stash_len(&self) -> usize {
        self.stash.values().map(Vec::len).sum()
    }

    fn offset_codes(&mut self, base: u32) {
        if base == 0 {
            return;
        }
        for s in self.slots.iter_mut().filter(|s| s.code != EMPTY) {
            s.code += base;
        }
        for codes in self.stash.values_mut() {
            for c in codes {
                *c += base;
            }
        }
    }

    fn bytes(&self) -> usize {
        self.slots.len() * std::mem::size_of::<Slot>()
    }
}

/// A dictionary under construction; codes are assigned in first-seen order.
#[derive(Debug, Clone)]
pub struct DictionaryBuilder<K: Keys> {
    table: ProbeTable,
    reverse: K,
    limit: u64,
}

impl<K: Keys> Default for DictionaryBuilder<K> {
    fn default() -> Self {
        Self::with_slots(MIN_SLOTS)
    }
}

impl<K: Keys> DictionaryBuilder<K> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts with `n_slots` slots (rounded up to a power of two).
    pub fn with_slots(n_slots: usize) -> Self {
        Self::partition(n_slots, 0)
    }

    fn partition(n_slots: usize, shift: u32) -> Self {
        DictionaryBuilder {
            table: ProbeTable::new(n_slots, shift),
            reverse: K::default(),
            limit: MAX_CODES,
        }
    }

    /// Caps the number of codes; mostly useful to exercise exhaustion.
    pub fn with_code_limit(mut self, limit: u64) -> Self {
        self.limit = limit.min(MAX_CODES);
        self
    }

    pub fn len(&self) -> usize {
        self.reverse.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn insert_or_lookup(&mut self, key: K::Key<'_>) -> Result<u32> {
        self.insert_hashed(K::key_hash(key), key)
    }

    #[inline]
    fn insert_hashed(&mut self, hash: u64, key: K::Key<'_>) -> Result<u32> {
        let reverse = &self.reverse;
        if let Some(code) = self
            .table
            .find(hash, |c| K::key_eq(reverse.key(c as usize), key))
        {
            return Ok(code);
        }
        let code = self.reverse.len() as u64;
        if code >= self.limit {
            return Err(Error::CapacityExhausted(code));
        }
        if self.table.needs_growth() {
            self.table.grow();
        }
        self.table.place(hash, code as u32);
        self.reverse.push_key(key);
        Ok(code as u32)
    }

    pub fn lookup(&self, key: K::Key<'_>) -> Option<u32> {
        let reverse = &self.reverse;
        self.table
            .find(K::key_hash(key), |c| K::key_eq(reverse.key(c as usize), key))
    }

    /// Values that overflowed their probe window.
    pub fn stash_len(&self) -> usize {
        self.table.stash_len()
    }

    pub fn finish(self) -> Dictionary {
        Dictionary {
            repr: Repr::Hashed {
                reverse: self.reverse.into_column(),
                tables: vec![self.table],
                part_bits: 0,
            },
        }
    }
}

#[derive(Debug, Clone)]
enum Repr {
    /// Values are already codes in `[0, n)`.
    Identity { n: usize },
    Hashed {
        reverse: Column,
        tables: Vec<ProbeTable>,
        part_bits: u32,
    },
}

/// A finished, read-only dictionary.
#[derive(Debug, Clone)]
pub struct Dictionary {
    repr: Repr,
}

impl Dictionary {
    pub fn identity(n: usize) -> Self {
        Dictionary {
            repr: Repr::Identity { n },
        }
    }

    pub fn len(&self) -> usize {
        match &self.repr {
            Repr::Identity { n } => *n,
            Repr::Hashed { reverse, .. } => reverse.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.repr, Repr::Identity { .. })
    }

    pub fn partitions(&self) -> usize {
        match &self.repr {
            Repr::Identity { .. } => 0,
            Repr::Hashed { tables, .. } => tables.len(),
        }
    }

    pub fn stash_len(&self) -> usize {
        match &self.repr {
            Repr::Identity { .. } => 0,
            Repr::Hashed { tables, .. } => tables.iter().map(ProbeTable::stash_len).sum(),
        }
    }

    /// Bytes held by the probe tables.
    pub fn table_bytes(&self) -> usize {
        match &self.repr {
            Repr::Identity { .. } => 0,
            Repr::Hashed { tables, .. } => tables.iter().map(ProbeTable::bytes).sum(),
        }
    }

    /// The decoded values in code order, unless this is an identity mapping.
    pub fn reverse(&self) -> Option<&Column> {
        match &self.repr {
            Repr::Identity { .. } => None,
            Repr::Hashed { reverse, .. } => Some(reverse),
        }
    }

    pub fn value(&self, code: u32) -> Value {
        match &self.repr {
            Repr::Identity { .. } => Value::Int(code as u64),
            Repr::Hashed { reverse, .. } => reverse.value(code as usize),
        }
    }

    pub fn lookup(&self, v: &Value) -> Option<u32> {
        match (&self.repr, v) {
            (Repr::Identity { n }, Value::Int(i)) => (*i < *n as u64).then_some(*i as u32),
            (Repr::Identity { .. }, Value::Bytes(_)) => None,
            (Repr::Hashed { reverse, .. }, _) => match (reverse, v) {
                (Column::Int(r), Value::Int(i)) => self.find::<Vec<u64>>(r, *i),
                (Column::Bytes(r), Value::Bytes(b)) => self.find::<ByteColumn>(r, b),
                _ => None,
            },
        }
    }

    fn find<K: Keys>(&self, reverse: &K, key: K::Key<'_>) -> Option<u32> {
        let Repr::Hashed {
            tables, part_bits, ..
        } = &self.repr
        else {
            unreachable!()
        };
        let h = K::key_hash(key);
        let p = (h & ((1u64 << part_bits) - 1)) as usize;
        tables[p].find(h, |c| K::key_eq(reverse.key(c as usize), key))
    }

    /// Codes for the selected rows of `col`; `EMPTY` where the value is absent.
    pub fn lookup_column(&self, col: &Column, rows: Option<&[u32]>) -> Vec<u32> {
        let n = rows.map_or(col.len(), <[u32]>::len);
        let row = |i: usize| rows.map_or(i, |r| r[i] as usize);
        match (&self.repr, col) {
            (Repr::Identity { n: card }, Column::Int(v)) => (0..n)
                .map(|i| {
                    let x = v[row(i)];
                    if x < *card as u64 {
                        x as u32
                    } else {
                        EMPTY
                    }
                })
                .collect(),
            (Repr::Identity { .. }, Column::Bytes(_)) => vec![EMPTY; n],
            (Repr::Hashed { reverse, .. }, _) => match (reverse, col) {
                (Column::Int(r), Column::Int(c)) => {
                    (0..n).map(|i| self.find(r, c[row(i)]).unwrap_or(EMPTY)).collect()
                }
                (Column::Bytes(r), Column::Bytes(c)) => {
                    (0..n).map(|i| self.find(r, c.get(row(i))).unwrap_or(EMPTY)).collect()
                }
                _ => vec![EMPTY; n],
            },
        }
    }
}

/// Tuning for the mapping phase.
#[derive(Debug, Clone, Copy)]
pub struct MapOptions {
    /// Cache budget a single probe table should fit in.
    pub llc_bytes: usize,
    /// Skip-mapping decisions for `x`, `y`, `z`: `None` auto-detects,
    /// `Some(true)` declares the column as natural keys, `Some(false)` forces
    /// a hashed dictionary.
    pub skip: [Option<bool>; 3],
    /// Density factor for natural-key detection.
    pub density: f64,
}

impl Default for MapOptions {
    fn default() -> Self {
        MapOptions {
            llc_bytes: DEFAULT_LLC_BYTES,
            skip: [None; 3],
            density: 2.0,
        }
    }
}

impl MapOptions {
    /// Always builds hashed dictionaries.
    pub fn hashed() -> Self {
        MapOptions {
            skip: [Some(false); 3],
            ..Self::default()
        }
    }
}

/// Estimates the number of distinct values from an evenly strided sample with
/// the GEE estimator `sqrt(n/r)·f1 + Σ_{j≥2} f_j`. Exact when the column is no
/// larger than the sample.
pub fn estimate_distinct(col: &Column) -> usize {
    with_keys!(col, c => sample_distinct(c))
}

/// Whether `column` may skip dictionary construction and use its values as
/// codes directly.
pub fn detect_natural_keys(column: &Column, hint: Option<bool>) -> bool {
    detect_natural_keys_with(column, hint, 2.0)
}

pub fn detect_natural_keys_with(column: &Column, hint: Option<bool>, density: f64) -> bool {
    let Column::Int(v) = column else {
        return false;
    };
    match hint {
        Some(h) => h,
        None => {
            let Some(&max) = v.iter().max() else {
                return true;
            };
            let bound = density * estimate_distinct(column) as f64;
            (max as f64) < bound && max < MAX_CODES
        }
    }
}

/// Codes of a column, one per selected row, with the dictionary that produced them.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub dict: Dictionary,
    pub codes: Vec<u32>,
}

/// Encodes the selected rows of a column (all rows when `rows` is `None`).
pub fn encode_column(
    col: &Column,
    rows: Option<&[u32]>,
    skip: Option<bool>,
    opts: &MapOptions,
) -> Result<Encoded> {
    if detect_natural_keys_with(col, skip, opts.density) {
        let v = col.as_ints().expect("natural keys are integers");
        let codes: Vec<u64> = match rows {
            Some(r) => r.iter().map(|&i| v[i as usize]).collect(),
            None => v.to_vec(),
        };
        let n = codes.iter().max().map_or(0, |&m| m + 1);
        if n > MAX_CODES {
            return Err(Error::CapacityExhausted(n));
        }
        return Ok(Encoded {
            dict: Dictionary::identity(n as usize),
            codes: codes.into_iter().map(|c| c as u32).collect(),
        });
    }
    with_keys!(col, c => encode_hashed(c, rows, opts.llc_bytes))
}

fn encode_hashed<K: Keys>(col: &K, rows: Option<&[u32]>, llc_bytes: usize) -> Result<Encoded> {
    let n = rows.map_or(col.len(), <[u32]>::len);
    let row = |i: usize| rows.map_or(i, |r| r[i] as usize);
    let distinct = sample_distinct(col).min(n);
    let slots = ((distinct as f64 / MAX_LOAD).ceil() as usize + 1).next_power_of_two();
    let bytes = slots * std::mem::size_of::<Slot>();
    let part_bits = if bytes > llc_bytes && llc_bytes > 0 {
        ((bytes as f64 / llc_bytes as f64).log2().ceil() as u32).min(16)
    } else {
        0
    };

    if part_bits == 0 {
        let mut b = DictionaryBuilder::<K>::partition(slots, 0);
        let mut codes = Vec::with_capacity(n);
        for i in 0..n {
            let k = col.key(row(i));
            codes.push(b.insert_hashed(K::key_hash(k), k)?);
        }
        return Ok(Encoded {
            dict: b.finish(),
            codes,
        });
    }

    // Scatter row positions by partition, then build each partition alone.
    let n_parts = 1usize << part_bits;
    let mask = (n_parts - 1) as u64;
    let hashes: Vec<u64> = (0..n).map(|i| K::key_hash(col.key(row(i)))).collect();
    let mut start = vec![0usize; n_parts + 1];
    for &h in &hashes {
        start[(h & mask) as usize + 1] += 1;
    }
    for p in 0..n_parts {
        start[p + 1] += start[p];
    }
    let mut fill = start.clone();
    let mut order = vec![0u32; n];
    for (i, &h) in hashes.iter().enumerate() {
        let p = (h & mask) as usize;
        order[fill[p]] = i as u32;
        fill[p] += 1;
    }

    let mut codes = vec![0u32; n];
    let mut tables = Vec::with_capacity(n_parts);
    let mut reverse = K::default();
    let mut base: u64 = 0;
    for p in 0..n_parts {
        let mut b = DictionaryBuilder::<K>::partition(slots >> part_bits, part_bits)
            .with_code_limit(MAX_CODES - base);
        for &i in &order[start[p]..start[p + 1]] {
            let i = i as usize;
            codes[i] = b.insert_hashed(hashes[i], col.key(row(i)))? + base as u32;
        }
        let mut table = b.table;
        table.offset_codes(base as u32);
        for c in 0..b.reverse.len() {
            reverse.push_key(b.reverse.key(c));
        }
        base += b.reverse.len() as u64;
        tables.push(table);
    }
    Ok(Encoded {
        dict: Dictionary {
            repr: Repr::Hashed {
                reverse: reverse.into_column(),
                tables,
                part_bits,
            },
        },
        codes,
    })
}

fn sample_distinct<K: Keys>(col: &K) -> usize {
    let n = col.len();
    if n == 0 {
        return 0;
    }
    let r = n.min(SAMPLE_ROWS);
    let mut freq: FastMap<u64, u32> = FastMap::default();
    for i in 0..r {
        let row = (i as u128 * n as u128 / r as u128) as usize;
        *freq.entry(K::key_hash(col.key(row))).or_default() += 1;
    }
    if r == n {
        return freq.len();
    }
    let f1 = freq.values().filter(|&&c| c == 1).count() as f64;
    let rest = freq.values().filter(|&&c| c > 1).count() as f64;
    ((n as f64 / r as f64).sqrt() * f1 + rest).round() as usize
}

/// The join-key mapping, built from `S.y` and probed with `R.y`.
#[derive(Debug, Clone)]
pub struct JoinKeyCodes {
    pub dict: Dictionary,
    /// One code per `S` row.
    pub s_y: Vec<u32>,
    /// One code per `R` row, `EMPTY` when the value never occurs in `S.y`.
    pub r_y: Vec<u32>,
}

impl JoinKeyCodes {
    /// `Σ_y d_R(y)·d_S(y)` over the raw rows, i.e. the exact size of the bag
    /// join. The flag is set when the sum saturated.
    pub fn join_size(&self) -> (u64, bool) {
        let n = self.dict.len();
        let mut d_s = vec![0u64; n];
        for &y in &self.s_y {
            d_s[y as usize] += 1;
        }
        let mut total: u64 = 0;
        let mut saturated = false;
        for &y in &self.r_y {
            if y != EMPTY {
                match total.checked_add(d_s[y as usize]) {
                    Some(t) => total = t,
                    None => {
                        total = u64::MAX;
                        saturated = true;
                    }
                }
            }
        }
        (total, saturated)
    }
}

/// Encodes `S.y`, then looks up `R.y` against it. Mixed integer and string
/// key columns are compared as strings.
pub fn map_join_key(r: &RawTable, s: &RawTable, opts: &MapOptions) -> Result<JoinKeyCodes> {
    let (ry, sy) = unify(r.right(), s.right());
    let enc = encode_column(&sy, None, opts.skip[1], opts)?;
    let mut r_y = enc.dict.lookup_column(&ry, None);
    if enc.dict.is_identity() {
        // an identity code space has holes; keys absent from S must still drop
        let mut present = vec![false; enc.dict.len()];
        for &y in &enc.codes {
            present[y as usize] = true;
        }
        for y in &mut r_y {
            if *y != EMPTY && !present[*y as usize] {
                *y = EMPTY;
            }
        }
    }
    Ok(JoinKeyCodes {
        dict: enc.dict,
        s_y: enc.codes,
        r_y,
    })
}

pub(crate) fn unify<'a>(a: &'a Column, b: &'a Column) -> (std::borrow::Cow<'a, Column>, std::borrow::Cow<'a, Column>) {
    use std::borrow::Cow;
    match (a, b) {
        (Column::Int(_), Column::Bytes(_)) => (Cow::Owned(a.to_bytes()), Cow::Borrowed(b)),
        (Column::Bytes(_), Column::Int(_)) => (Cow::Borrowed(a), Cow::Owned(b.to_bytes())),
        _ => (Cow::Borrowed(a), Cow::Borrowed(b)),
    }
}

#[derive(Debug, Clone)]
pub struct MappingOutput {
    /// Pairs `(x, y)`.
    pub r_mapped: MappedTable,
    /// Pairs `(z, y)`.
    pub s_mapped: MappedTable,
    pub dict_x: Dictionary,
    pub dict_y: Dictionary,
    pub dict_z: Dictionary,
    pub dropped_r: usize,
    /// Raw `R` row index of each `r_mapped` pair.
    pub r_rows: Vec<u32>,
}

/// Maps both tables. `s` should be the smaller one: its join keys seed the
/// dictionary and `R` rows without a partner are dropped before `x` is mapped.
pub fn map_tables(r: &RawTable, s: &RawTable, opts: &MapOptions) -> Result<MappingOutput> {
    let y = map_join_key(r, s, opts)?;
    map_tables_with(r, s, y, opts)
}

/// Finishes mapping given join-key codes from [`map_join_key`].
pub fn map_tables_with(
    r: &RawTable,
    s: &RawTable,
    y: JoinKeyCodes,
    opts: &MapOptions,
) -> Result<MappingOutput> {
    let r_rows: Vec<u32> = (0..r.len() as u32)
        .filter(|&i| y.r_y[i as usize] != EMPTY)
        .collect();
    let dropped_r = r.len() - r_rows.len();
    let x = encode_column(r.left(), Some(&r_rows), opts.skip[0], opts)?;
    let z = encode_column(s.left(), None, opts.skip[2], opts)?;
    let n_y = y.dict.len();
    let r_pairs = x
        .codes
        .iter()
        .zip(&r_rows)
        .map(|(&xc, &i)| (xc, y.r_y[i as usize]))
        .collect();
    let s_pairs = z.codes.iter().copied().zip(y.s_y.iter().copied()).collect();
    Ok(MappingOutput {
        r_mapped: MappedTable::new(r_pairs, x.dict.len(), n_y),
        s_mapped: MappedTable::new(s_pairs, z.dict.len(), n_y),
        dict_x: x.dict,
        dict_y: y.dict,
        dict_z: z.dict,
        dropped_r,
        r_rows,
    })
}
