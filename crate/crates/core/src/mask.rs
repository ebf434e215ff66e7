//! Attention-permission matrices.

use std::ops::Range;

use crate::schedule::{Schedule, CONDITION_SLOT};

/// Boolean attend-permission matrix; `allow(q, k)` is true when query row `q`
/// may attend key column `k`. Square for a full sequence, rectangular for
/// incremental decoding where queries are a suffix of the keys.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allow: Vec<bool>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut allow = Vec::with_capacity(rows * cols);
        for q in 0..rows {
            for k in 0..cols {
                allow.push(f(q, k));
            }
        }
        Self { rows, cols, allow }
    }

    /// Strictly causal (lower-triangular including the diagonal) mask.
    pub fn causal(size: usize) -> Self {
        Self::from_fn(size, size, |q, k| k <= q)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Sequence length of a square mask.
    pub fn size(&self) -> usize {
        debug_assert_eq!(self.rows, self.cols);
        self.rows
    }

    #[inline]
    pub fn allow(&self, q: usize, k: usize) -> bool {
        self.allow[q * self.cols + k]
    }

    pub fn row(&self, q: usize) -> &[bool] {
        &self.allow[q * self.cols..(q + 1) * self.cols]
    }

    /// Rows `queries` restricted to the first `keys` columns.
    pub fn submask(&self, queries: Range<usize>, keys: usize) -> Self {
        Self::from_fn(queries.len(), keys, |q, k| self.allow(queries.start + q, k))
    }

    /// One line of `0`/`1` characters per row.
    pub fn dump(&self) -> String {
        let mut out = String::with_capacity(self.rows * (self.cols + 1));
        for q in 0..self.rows {
            out.extend(self.row(q).iter().map(|&a| if a { '1' } else { '0' }));
            out.push('\n');
        }
        out
    }
}

/// Proximity-aware mask over `[condition] ++ schedule.order`: causal across
/// steps, bidirectional within a step. The condition attends only itself and
/// is visible to every token.
pub fn build_mask(schedule: &Schedule) -> AttentionMask {
    let n = schedule.seq_len();
    let step: Vec<Option<usize>> = (0..n).map(|slot| schedule.slot_step(slot)).collect();
    AttentionMask::from_fn(n, n, |q, k| {
        if q == CONDITION_SLOT {
            return k == CONDITION_SLOT;
        }
        match step[k] {
            None => true,
            Some(sk) => sk <= step[q].expect("token slot"),
        }
    })
}
