//! Raw two-column relations, edge-list I/O, and compressed sparse rows.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::{hash_bytes, mix64};

/// One opaque attribute value.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Value {
    Int(u64),
    Bytes(Vec<u8>),
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Int(v) => write!(f, "{v}"),
            Value::Bytes(b) => f.write_str(&String::from_utf8_lossy(b)),
        }
    }
}

impl From<u64> for Value {
    fn from(v: u64) -> Self {
        Value::Int(v)
    }
}

impl From<&str> for Value {
    fn from(v: &str) -> Self {
        Value::Bytes(v.as_bytes().to_vec())
    }
}

/// Variable-length byte strings packed into one buffer.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ByteColumn {
    offsets: Vec<usize>,
    data: Vec<u8>,
}

impl ByteColumn {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        if self.offsets.is_empty() {
            self.offsets.push(0);
        }
        self.data.extend_from_slice(bytes);
        self.offsets.push(self.data.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> &[u8] {
        &self.data[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u8]> + '_ {
        (0..self.len()).map(move |i| self.get(i))
    }
}

impl FromIterator<String> for ByteColumn {
    fn from_iter<T: IntoIterator<Item = String>>(iter: T) -> Self {
        let mut c = ByteColumn::new();
        for s in iter {
            c.push(s.as_bytes());
        }
        c
    }
}

impl<'a> FromIterator<&'a [u8]> for ByteColumn {
    fn from_iter<T: IntoIterator<Item = &'a [u8]>>(iter: T) -> Self {
        let mut c = ByteColumn::new();
        for b in iter {
            c.push(b);
        }
        c
    }
}

/// A homogeneous column of values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Column {
    Int(Vec<u64>),
    Bytes(ByteColumn),
}

impl Column {
    pub fn len(&self) -> usize {
        match self {
            Column::Int(v) => v.len(),
            Column::Bytes(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn value(&self, i: usize) -> Value {
        match self {
            Column::Int(v) => Value::Int(v[i]),
            Column::Bytes(b) => Value::Bytes(b.get(i).to_vec()),
        }
    }

    /// The column as byte strings; integers render in decimal, matching how
    /// they would read from a text file.
    pub fn to_bytes(&self) -> Column {
        match self {
            Column::Int(v) => Column::Bytes(v.iter().map(|x| x.to_string()).collect()),
            Column::Bytes(b) => Column::Bytes(b.clone()),
        }
    }

    /// The values at `rows`, in that order.
    pub fn gather(&self, rows: impl Iterator<Item = usize>) -> Column {
        match self {
            Column::Int(v) => Column::Int(rows.map(|i| v[i]).collect()),
            Column::Bytes(b) => Column::Bytes(rows.map(|i| b.get(i)).collect()),
        }
    }

    pub fn as_ints(&self) -> Option<&[u64]> {
        match self {
            Column::Int(v) => Some(v),
            Column::Bytes(_) => None,
        }
    }

    /// Order-sensitive content hash.
    pub fn fingerprint(&self) -> u64 {
        match self {
            Column::Int(v) => v
                .iter()
                .fold(0x1u64, |h, &x| mix64(h.rotate_left(7) ^ mix64(x))),
            Column::Bytes(b) => b
                .iter()
                .fold(0x2u64, |h, x| mix64(h.rotate_left(7) ^ hash_bytes(x))),
        }
    }
}

/// Uniform access to the two column representations, so that hashing,
/// dictionary and join code is written once and monomorphized per type.
pub trait Keys: Default + Send + Sync + 'static {
    type Key<'a>: Copy + Eq + std::hash::Hash + fmt::Debug
    where
        Self: 'a;

    fn len(&self) -> usize;
    fn key(&self, i: usize) -> Self::Key<'_>;
    fn push_key(&mut self, k: Self::Key<'_>);
    fn key_hash(k: Self::Key<'_>) -> u64;
    fn key_eq(a: Self::Key<'_>, b: Self::Key<'_>) -> bool;
    fn key_value(k: Self::Key<'_>) -> Value;
    fn into_column(self) -> Column;
    /// Bytes the stored keys occupy, for cache-size estimates.
    fn key_bytes(&self) -> usize;
}

impl Keys for Vec<u64> {
    type Key<'a> = u64;

    #[inline]
    fn len(&self) -> usize {
        Vec::len(self)
    }
    #[inline]
    fn key(&self, i: usize) -> u64 {
        self[i]
    }
    #[inline]
    fn push_key(&mut self, k: u64) {
        self.push(k)
    }
    #[inline]
    fn key_hash(k: u64) -> u64 {
        mix64(k)
    }
    #[inline]
    fn key_eq(a: u64, b: u64) -> bool {
        a == b
    }
    fn key_value(k: u64) -> Value {
        Value::Int(k)
    }
    fn into_column(self) -> Column {
        Column::Int(self)
    }
    fn key_bytes(&self) -> usize {
        self.len() * 8
    }
}

impl Keys for ByteColumn {
    type Key<'a> = &'a [u8];

    #[inline]
    fn len(&self) -> usize {
        ByteColumn::len(self)
    }
    #[inline]
    fn key(&self, i: usize) -> &[u8] {
        self.get(i)
    }
    #[inline]
    fn push_key(&mut self, k: &[u8]) {
        self.push(k)
    }
    #[inline]
    fn key_hash(k: &[u8]) -> u64 {
        hash_bytes(k)
    }
    #[inline]
    fn key_eq(a: &[u8], b: &[u8]) -> bool {
        a == b
    }
    fn key_value(k: &[u8]) -> Value {
        Value::Bytes(k.to_vec())
    }
    fn into_column(self) -> Column {
        Column::Bytes(self)
    }
    fn key_bytes(&self) -> usize {
        self.data.len() + self.offsets.len() * 8
    }
}

/// Runs `$body` with `$c` bound to the concrete `Keys` implementation inside
/// a `&Column`.
macro_rules! with_keys {
    ($col:expr, $c:ident => $body:expr) => {
        match $col {
            $crate::relation::Column::Int($c) => $body,
            $crate::relation::Column::Bytes($c) => $body,
        }
    };
}
pub(crate) use with_keys;

/// A bag of `(left, right)` rows. For `R(x,y)` left is `x`; for `S(z,y)` left
/// is `z`. The right column is always the join key.
#[derive(Debug, Clone)]
pub struct RawTable {
    left: Arc<Column>,
    right: Arc<Column>,
}

impl RawTable {
    pub fn new(left: Column, right: Column) -> Result<Self> {
        if left.len() != right.len() {
            return Err(Error::Param(format!(
                "column lengths differ: {} vs {}",
                left.len(),
                right.len()
            )));
        }
        Ok(RawTable {
            left: Arc::new(left),
            right: Arc::new(right),
        })
    }

    pub fn from_pairs(pairs: &[(u64, u64)]) -> Self {
        let (l, r) = pairs.iter().copied().unzip();
        RawTable {
            left: Arc::new(Column::Int(l)),
            right: Arc::new(Column::Int(r)),
        }
    }

    pub fn from_str_pairs(pairs: &[(&str, &str)]) -> Self {
        let l = pairs.iter().map(|p| p.0.as_bytes()).collect();
        let r = pairs.iter().map(|p| p.1.as_bytes()).collect();
        RawTable {
            left: Arc::new(Column::Bytes(l)),
            right: Arc::new(Column::Bytes(r)),
        }
    }

    /// Builds a table from arbitrary values; each column must be homogeneous.
    pub fn from_values(rows: &[(Value, Value)]) -> Result<Self> {
        fn column<'a>(vals: impl Iterator<Item = &'a Value> + Clone) -> Result<Column> {
            let first = vals.clone().next();
            match first {
                None | Some(Value::Int(_)) => vals
                    .map(|v| match v {
                        Value::Int(i) => Ok(*i),
                        Value::Bytes(_) => Err(Error::Param("mixed column types".into())),
                    })
                    .collect::<Result<Vec<_>>>()
                    .map(Column::Int),
                Some(Value::Bytes(_)) => {
                    let mut c = ByteColumn::new();
                    for v in vals {
                        match v {
                            Value::Bytes(b) => c.push(b),
                            Value::Int(_) => {
                                return Err(Error::Param("mixed column types".into()))
                            }
                        }
                    }
                    Ok(Column::Bytes(c))
                }
            }
        }
        RawTable::new(
            column(rows.iter().map(|r| &r.0))?,
            column(rows.iter().map(|r| &r.1))?,
        )
    }

    pub fn len(&self) -> usize {
        self.left.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn left(&self) -> &Arc<Column> {
        &self.left
    }

    pub fn right(&self) -> &Arc<Column> {
        &self.right
    }

    pub fn row(&self, i: usize) -> (Value, Value) {
        (self.left.value(i), self.right.value(i))
    }

    pub fn rows(&self) -> impl Iterator<Item = (Value, Value)> + '_ {
        (0..self.len()).map(move |i| self.row(i))
    }

    /// The same rows with the columns exchanged, e.g. an edge list `(u, v)`
    /// viewed as `S(z=v, y=u)`.
    pub fn swapped(&self) -> RawTable {
        RawTable {
            left: Arc::clone(&self.right),
            right: Arc::clone(&self.left),
        }
    }

    pub fn fingerprint(&self) -> u64 {
        mix64(self.left.fingerprint() ^ self.right.fingerprint().rotate_left(17))
    }
}

impl PartialEq for RawTable {
    fn eq(&self, other: &Self) -> bool {
        self.left == other.left && self.right == other.right
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EdgeFormat {
    Tsv,
    Csv,
    BinaryU64Pairs,
}

impl EdgeFormat {
    /// Guess from the file extension: `.csv`, `.bin`, anything else is TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => EdgeFormat::Csv,
            Some("bin") => EdgeFormat::BinaryU64Pairs,
            _ => EdgeFormat::Tsv,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub format: EdgeFormat,
    /// Skip the first line of a text file.
    pub header: bool,
}

impl LoadOptions {
    pub fn new(format: EdgeFormat) -> Self {
        LoadOptions {
            format,
            header: false,
        }
    }
}

/// Reads a two-column edge list. Text columns become integer columns when
/// every field parses as `u64`, otherwise byte-string columns.
pub fn load_edge_list(path: impl AsRef<Path>, opts: LoadOptions) -> Result<RawTable> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    match opts.format {
        EdgeFormat::BinaryU64Pairs => read_binary(path, &mut reader),
        EdgeFormat::Tsv => read_text(path, reader, b'\t', opts.header, None),
        EdgeFormat::Csv => read_text(path, reader, b',', opts.header, None),
    }
}

/// Reads a text edge list with a third, numeric column, as used by
/// aggregate queries.
pub fn load_valued_edge_list(path: impl AsRef<Path>, opts: LoadOptions) -> Result<(RawTable, Vec<f64>)> {
    let path = path.as_ref();
    let sep = match opts.format {
        EdgeFormat::Tsv => b'\t',
        EdgeFormat::Csv => b',',
        EdgeFormat::BinaryU64Pairs => {
            return Err(Error::Param("valued edge lists must be TSV or CSV".into()))
        }
    };
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::new();
    let t = read_text(path, BufReader::new(file), sep, opts.header, Some(&mut values))?;
    Ok((t, values))
}

fn read_binary(path: &Path, reader: &mut impl Read) -> Result<RawTable> {
    let mut buf = Vec::new();
    reader
        .read_to_end(&mut buf)
        .map_err(|e| Error::io(path, e))?;
    if buf.len() % 16 != 0 {
        return Err(Error::Parse {
            path: path.into(),
            line: buf.len() / 16 + 1,
            msg: format!("truncated record: {} trailing bytes", buf.len() % 16),
        });
    }
    let mut left = Vec::with_capacity(buf.len() / 16);
    let mut right = Vec::with_capacity(buf.len() / 16);
    for rec in buf.chunks_exact(16) {
        left.push(u64::from_le_bytes(rec[..8].try_into().unwrap()));
        right.push(u64::from_le_bytes(rec[8..].try_into().unwrap()));
    }
    RawTable::new(Column::Int(left), Column::Int(right))
}

/// Accumulates one text column, keeping an integer view while it is still valid.
#[derive(Default)]
struct TextColumn {
    bytes: ByteColumn,
    ints: Option<Vec<u64>>,
}

impl TextColumn {
    fn new() -> Self {
        TextColumn {
            bytes: ByteColumn::new(),
            ints: Some(Vec::new()),
        }
    }

    fn push(&mut self, field: &[u8]) {
        if let Some(ints) = &mut self.ints {
            match std::str::from_utf8(field).ok().and_then(|s| s.parse::<u64>().ok()) {
                Some(v) => ints.push(v),
                None => self.ints = None,
            }
        }
        self.bytes.push(field);
    }

    fn finish(self) -> Column {
        match self.ints {
            Some(v) => Column::Int(v),
            None => Column::Bytes(self.bytes),
        }
    }
}

fn read_text(
    path: &Path,
    mut reader: impl BufRead,
    sep: u8,
    header: bool,
    mut values: Option<&mut Vec<f64>>,
) -> Result<RawTable> {
    let mut left = TextColumn::new();
    let mut right = TextColumn::new();
    let mut line = Vec::new();
    let mut lineno = 0;
    loop {
        line.clear();
        let n = reader
            .read_until(b'\n', &mut line)
            .map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        lineno += 1;
        if header && lineno == 1 {
            continue;
        }
        let mut body: &[u8] = &line;
        while let [rest @ .., b'\n' | b'\r'] = body {
            body = rest;
        }
        if body.is_empty() {
            continue;
        }
        let parse_err = |msg: &str| Error::Parse {
            path: path.into(),
            line: lineno,
            msg: msg.into(),
        };
        let mut fields = body.split(|&b| b == sep);
        let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
            return Err(parse_err("expected at least two fields"));
        };
        match (&mut values, fields.next(), fields.next()) {
            (None, None, _) => {}
            (None, Some(_), _) => return Err(parse_err("expected exactly two fields")),
            (Some(vals), Some(v), None) => {
                let v = std::str::from_utf8(v)
                    .ok()
                    .and_then(|v| v.trim().parse::<f64>().ok())
                    .ok_or_else(|| parse_err("third field is not a number"))?;
                vals.push(v);
            }
            (Some(_), _, _) => return Err(parse_err("expected exactly three fields")),
        }
        left.push(a);
        right.push(b);
    }
    RawTable::new(left.finish(), right.finish())
}

/// Writes a table in the given format. Binary output needs integer columns.
pub fn write_edge_list(table: &RawTable, path: impl AsRef<Path>, format: EdgeFormat) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    match format {
        EdgeFormat::BinaryU64Pairs => {
            let (Some(l), Some(r)) = (table.left.as_ints(), table.right.as_ints()) else {
                return Err(Error::Param(
                    "binary edge lists require integer columns".into(),
                ));
            };
            for (a, b) in l.iter().zip(r) {
                w.write_all(&a.to_le_bytes()).map_err(io)?;
                w.write_all(&b.to_le_bytes()).map_err(io)?;
            }
        }
        EdgeFormat::Tsv | EdgeFormat::Csv => {
            let sep = if format == EdgeFormat::Tsv { '\t' } else { ',' };
            for i in 0..table.len() {
                let (a, b) = table.row(i);
                writeln!(w, "{a}{sep}{b}").map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

/// A relation after dictionary encoding: `a` indexes rows, `b` columns.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MappedTable {
    pub pairs: Vec<(u32, u32)>,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl MappedTable {
    pub fn new(pairs: Vec<(u32, u32)>, n_rows: usize, n_cols: usize) -> Self {
        debug_assert!(pairs
            .iter()
            .all(|&(a, b)| (a as usize) < n_rows && (b as usize) < n_cols));
        MappedTable {
            pairs,
            n_rows,
            n_cols,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Major {
    /// Rows are `a` codes.
    ByA,
    /// Rows are `b` codes (the transpose).
    ByB,
}

/// Boolean matrix in compressed sparse row form. Column ids within a row are
/// sorted and unique.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CsrMatrix {
    row_ptr: Vec<usize>,
    col: Vec<u32>,
    n_cols: usize,
}

impl CsrMatrix {
    /// Builds from raw parts, checking every structural invariant.
    pub fn from_parts(row_ptr: Vec<usize>, col: Vec<u32>, n_cols: usize) -> Result<Self> {
        let bad = |m: &str| Err(Error::Param(format!("invalid CSR: {m}")));
        if row_ptr.first() != Some(&0) || row_ptr.last() != Some(&col.len()) {
            return bad("row_ptr must start at 0 and end at nnz");
        }
        if row_ptr.windows(2).any(|w| w[0] > w[1]) {
            return bad("row_ptr must be nondecreasing");
        }
        for w in row_ptr.windows(2) {
            let row = &col[w[0]..w[1]];
            if row.iter().any(|&c| c as usize >= n_cols) {
                return bad("column id out of range");
            }
            if row.windows(2).any(|p| p[0] >= p[1]) {
                return bad("row entries must be sorted and unique");
            }
        }
        Ok(CsrMatrix {
            row_ptr,
            col,
            n_cols,
        })
    }

    /// Counting-sorts `len` coordinates by row, then sorts and deduplicates
    /// each row in place.
    pub(crate) fn from_coords(
        n_rows: usize,
        n_cols: usize,
        len: usize,
        coord: impl Fn(usize) -> (u32, u32),
    ) -> Self {
        let mut row_ptr = vec![0usize; n_rows + 1];
        for i in 0..len {
            row_ptr[coord(i).0 as usize + 1] += 1;
        }
        for r in 0..n_rows {
            row_ptr[r + 1] += row_ptr[r];
        }
        let mut fill = row_ptr.clone();
        let mut col = vec![0u32; len];
        for i in 0..len {
            let (r, c) = coord(i);
            let slot = &mut fill[r as usize];
            col[*slot] = c;
            *slot += 1;
        }
        // sort + dedup each row, compacting toward the front
        let mut out = 0;
        let mut start = 0;
        for r in 0..n_rows {
            let end = row_ptr[r + 1];
            let row = &mut col[start..end];
            row.sort_unstable();
            let mut last = None;
            let row_start = out;
            for k in start..end {
                let c = col[k];
                if last != Some(c) {
                    col[out] = c;
                    out += 1;
                    last = Some(c);
                }
            }
            row_ptr[r] = row_start;
            start = end;
        }
        row_ptr[n_rows] = out;
        col.truncate(out);
        col.shrink_to_fit();
        CsrMatrix {
            row_ptr,
            col,
            n_cols,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.row_ptr.len() - 1
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn nnz(&self) -> usize {
        self.col.len()
    }

    pub fn row_ptr(&self) -> &[usize] {
        &self.row_ptr
    }

    pub fn col(&self) -> &[u32] {
        &self.col
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[u32] {
        &self.col[self.row_ptr[r]..self.row_ptr[r + 1]]
    }

    #[inline]
    pub fn degree(&self, r: usize) -> usize {
        self.row_ptr[r + 1] - self.row_ptr[r]
    }

    pub fn degrees(&self) -> Vec<u32> {
        self.row_ptr.windows(2).map(|w| (w[1] - w[0]) as u32).collect()
    }

    /// Number of entries in each column.
    pub fn col_counts(&self) -> Vec<u32> {
        let mut counts = vec![0u32; self.n_cols];
        for &c in &self.col {
            counts[c as usize] += 1;
        }
        counts
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        (0..self.n_rows()).flat_map(move |r| self.row(r).iter().map(move |&c| (r as u32, c)))
    }

    /// Keeps only the entries whose column satisfies `keep`.
    pub fn filter_cols(&self, keep: impl Fn(u32) -> bool) -> CsrMatrix {
        let mut row_ptr = Vec::with_capacity(self.row_ptr.len());
        let mut col = Vec::new();
        row_ptr.push(0);
        for r in 0..self.n_rows() {
            col.extend(self.row(r).iter().copied().filter(|&c| keep(c)));
            row_ptr.push(col.len());
        }
        CsrMatrix {
            row_ptr,
            col,
            n_cols: self.n_cols,
        }
    }

    pub fn transpose(&self) -> CsrMatrix {
        let coords: Vec<(u32, u32)> = self.iter().map(|(r, c)| (c, r)).collect();
        CsrMatrix::from_coords(self.n_cols, self.n_rows(), coords.len(), |i| coords[i])
    }

    pub fn heap_bytes(&self) -> usize {
        self.row_ptr.len() * std::mem::size_of::<usize>() + self.col.len() * 4
    }
}

/// Builds the CSR of a mapped table over the chosen major axis; duplicate
/// pairs collapse to one entry.
pub fn build_csr(t: &MappedTable, major: Major) -> CsrMatrix {
    match major {
        Major::ByA => CsrMatrix::from_coords(t.n_rows, t.n_cols, t.pairs.len(), |i| t.pairs[i]),
        Major::ByB => CsrMatrix::from_coords(t.n_cols, t.n_rows, t.pairs.len(), |i| {
            let (a, b) = t.pairs[i];
            (b, a)
        }),
    }
}
