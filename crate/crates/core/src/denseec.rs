//! Dense existence checks over bit panels.
//!
//! For each `x` row and each dense `z` column the kernel only needs to know
//! whether the two `y` sets intersect, so every check stops at the first
//! common bit. A check either probes the row's `y` list against the column
//! bitmap one bit at a time, or ANDs the two bitmaps block by block.

use std::ops::Range;

use crate::costmodel::{CostConstants, ThresholdMemo};
use crate::error::{Error, Result};
use crate::relation::CsrMatrix;
use crate::sink::{run_ranges, split_rows, PairSink, Tally};

/// Words per bitmap for `y_card` bits padded to whole `w`-bit blocks.
pub fn padded_words(y_card: usize, w: u32) -> usize {
    let block_words = block_words(w);
    y_card.div_ceil(64).div_ceil(block_words) * block_words
}

#[inline]
fn block_words(w: u32) -> usize {
    (w as usize).div_ceil(64).max(1)
}

/// The dense part of `S`: one padded `|Y|`-bit row per dense `z`, stored
/// contiguously.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct BitmapPanel {
    dense_z: Vec<u32>,
    m_z: Vec<u32>,
    bits: Vec<u64>,
    words: usize,
    y_card: usize,
    w: u32,
}

impl BitmapPanel {
    /// Allocates an all-zero panel, refusing when it would exceed `budget` bytes.
    pub fn zeroed(dense_z: Vec<u32>, y_card: usize, w: u32, budget: u64) -> Result<Self> {
        let words = padded_words(y_card, w);
        let bytes = (dense_z.len() as u128) * words as u128 * 8;
        if bytes > budget as u128 {
            return Err(Error::Resource(format!(
                "bit panel needs {bytes} bytes, budget is {budget}"
            )));
        }
        Ok(BitmapPanel {
            m_z: vec![0; dense_z.len()],
            bits: vec![0; dense_z.len() * words],
            dense_z,
            words,
            y_card,
            w,
        })
    }

    /// Sets bit `y` of panel row `j`.
    #[inline]
    pub fn set(&mut self, j: usize, y: u32) {
        let word = &mut self.bits[j * self.words + (y as usize >> 6)];
        let mask = 1u64 << (y & 63);
        if *word & mask == 0 {
            *word |= mask;
            self.m_z[j] += 1;
        }
    }

    pub fn len(&self) -> usize {
        self.dense_z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dense_z.is_empty()
    }

    pub fn dense_z_ids(&self) -> &[u32] {
        &self.dense_z
    }

    pub fn m_z(&self) -> &[u32] {
        &self.m_z
    }

    #[inline]
    pub fn row(&self, j: usize) -> &[u64] {
        &self.bits[j * self.words..(j + 1) * self.words]
    }

    pub fn words_per_row(&self) -> usize {
        self.words
    }

    pub fn y_card(&self) -> usize {
        self.y_card
    }

    pub fn w(&self) -> u32 {
        self.w
    }

    pub fn bytes(&self) -> usize {
        self.bits.len() * 8
    }
}

/// The `y` set of the current `x` row as a padded bitmap.
#[derive(Debug, Clone)]
pub struct RowBitmap {
    words: Vec<u64>,
}

impl RowBitmap {
    pub fn new(words: usize) -> Self {
        RowBitmap {
            words: vec![0; words],
        }
    }

    #[inline]
    pub fn load(&mut self, ys: &[u32]) {
        for &y in ys {
            self.words[y as usize >> 6] |= 1u64 << (y & 63);
        }
    }

    /// Zeroes only the words `ys` touched.
    #[inline]
    pub fn clear(&mut self, ys: &[u32]) {
        for &y in ys {
            self.words[y as usize >> 6] = 0;
        }
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn bytes(&self) -> usize {
        self.words.len() * 8
    }
}

/// Whether any `w`-bit block of `a & b` is nonzero, and how many blocks were
/// examined.
#[inline]
pub fn block_and_any_counted(a: &[u64], b: &[u64], w: u32) -> (bool, u64) {
    debug_assert_eq!(a.len(), b.len());
    let bw = block_words(w);
    let mut n = 0;
    for (ca, cb) in a.chunks_exact(bw).zip(b.chunks_exact(bw)) {
        n += 1;
        let mut acc = 0;
        for (x, y) in ca.iter().zip(cb) {
            acc |= x & y;
        }
        if acc != 0 {
            return (true, n);
        }
    }
    (false, n)
}

#[inline]
pub fn block_and_any(a: &[u64], b: &[u64], w: u32) -> bool {
    block_and_any_counted(a, b, w).0
}

/// Probes the bits listed in `ys` until one is set; returns the result and
/// the number of probes.
#[inline]
pub fn probe_any_counted(ys: &[u32], bz: &[u64]) -> (bool, u64) {
    for (i, &y) in ys.iter().enumerate() {
        if bz[y as usize >> 6] >> (y & 63) & 1 != 0 {
            return (true, i as u64 + 1);
        }
    }
    (false, ys.len() as u64)
}

#[inline]
pub fn probe_any(ys: &[u32], bz: &[u64]) -> bool {
    probe_any_counted(ys, bz).0
}

/// How each check chooses its comparison method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CheckMode {
    /// Follow the sign of `f3`.
    #[default]
    Auto,
    Wide,
    Probe,
}

/// Checks rows `rows` of `r` against every panel column.
pub fn dense_ec_range<S: PairSink, T: Tally>(
    r: &CsrMatrix,
    panel: &BitmapPanel,
    rows: Range<usize>,
    mode: CheckMode,
    memo: &mut ThresholdMemo,
    sink: &mut S,
    tally: &mut T,
) {
    if panel.is_empty() {
        return;
    }
    let mut bx = RowBitmap::new(panel.words);
    let w = panel.w;
    for x in rows {
        let ys = r.row(x);
        if ys.is_empty() {
            continue;
        }
        let split = match mode {
            CheckMode::Auto => Some(memo.split(ys.len() as u64)),
            _ => None,
        };
        let loaded = mode != CheckMode::Probe;
        if loaded {
            bx.load(ys);
        }
        for (j, (&z, &m_z)) in panel.dense_z.iter().zip(&panel.m_z).enumerate() {
            let bz = panel.row(j);
            let wide = match (mode, split) {
                (CheckMode::Wide, _) => true,
                (CheckMode::Probe, _) => false,
                (CheckMode::Auto, Some(s)) => s.wide(m_z as u64),
                (CheckMode::Auto, None) => unreachable!(),
            };
            let (hit, units) = if wide {
                block_and_any_counted(&bx.words, bz, w)
            } else {
                probe_any_counted(ys, bz)
            };
            tally.dense_check(z, wide, units);
            if hit {
                sink.push(x as u32, z);
                tally.emitted(z);
            }
        }
        if loaded {
            bx.clear(ys);
        }
    }
}

/// Parallel driver mirroring the sparse kernel: contiguous `x` ranges, a
/// private row bitmap and threshold memo per worker.
pub fn dense_ec_with<S: PairSink, T: Tally + Sync>(
    r: &CsrMatrix,
    panel: &BitmapPanel,
    mode: CheckMode,
    c: &CostConstants,
    workers: usize,
    new_sink: impl Fn() -> S + Sync,
    tally: &T,
) -> Vec<(S, T)> {
    let y_card = panel.y_card as u64;
    run_ranges(split_rows(r.row_ptr(), workers), |rows| {
        let mut memo = ThresholdMemo::new(y_card, c);
        let mut sink = new_sink();
        let mut t = tally.fork();
        dense_ec_range(r, panel, rows, mode, &mut memo, &mut sink, &mut t);
        (sink, t)
    })
}

pub fn dense_ec(r: &CsrMatrix, panel: &BitmapPanel, c: &CostConstants) -> Vec<(u32, u32)> {
    dense_ec_with(r, panel, CheckMode::Auto, c, 1, Vec::new, &crate::sink::NoTally)
        .pop()
        .map(|(v, _)| v)
        .unwrap_or_default()
}
