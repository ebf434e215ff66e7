//! Near-to-far generation order.
//!
//! Positions are grouped by Manhattan distance from the origin; step `i`
//! holds every position at distance `i`, listed in lexicographic order.
//! The flattened model sequence is `[condition] ++ order`, so the token at
//! `order[j]` lives in sequence slot `j + 1`.

use std::fmt::Write as _;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::grid::{predecessors, step_count, GridShape, Position};

/// Sequence slot occupied by the class condition.
pub const CONDITION_SLOT: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Schedule {
    shape: GridShape,
    order: Vec<Position>,
    /// Raster index -> index into `order`.
    rank: Vec<usize>,
    steps: Vec<(usize, usize)>,
    preds: Vec<Vec<(Position, usize)>>,
}

/// One supervised prediction: the hidden state at `source` predicts the token
/// at `target` along `axis`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TargetEntry {
    pub source: usize,
    pub axis: usize,
    pub target: usize,
}

/// Appends every in-bounds position with coordinate sum `remaining` (over the
/// axes from `axis` on) in lexicographic order.
fn push_level(
    dims: &[usize],
    axis: usize,
    remaining: usize,
    prefix: &mut Vec<usize>,
    out: &mut Vec<Position>,
) {
    if axis + 1 == dims.len() {
        if remaining < dims[axis] {
            prefix.push(remaining);
            out.push(Position(prefix.clone()));
            prefix.pop();
        }
        return;
    }
    // The trailing axes can absorb at most this much.
    let tail_cap: usize = dims[axis + 1..].iter().map(|d| d - 1).sum();
    let lo = remaining.saturating_sub(tail_cap);
    let hi = remaining.min(dims[axis] - 1);
    for c in lo..=hi {
        prefix.push(c);
        push_level(dims, axis + 1, remaining - c, prefix, out);
        prefix.pop();
    }
}

pub fn build_schedule(shape: &GridShape) -> Schedule {
    let num_steps = step_count(shape);
    let mut order = Vec::with_capacity(shape.num_tokens());
    let mut steps = Vec::with_capacity(num_steps);
    let mut prefix = Vec::with_capacity(shape.ndim());
    for s in 0..num_steps {
        let start = order.len();
        push_level(shape.dims(), 0, s, &mut prefix, &mut order);
        steps.push((start, order.len() - start));
    }
    let mut rank = vec![0; shape.num_tokens()];
    for (j, p) in order.iter().enumerate() {
        rank[shape.flat_index(p)] = j;
    }
    let preds = order
        .iter()
        .map(|p| predecessors(p, shape).expect("schedule positions are in bounds"))
        .collect();
    Schedule {
        shape: shape.clone(),
        order,
        rank,
        steps,
        preds,
    }
}

impl Schedule {
    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn order(&self) -> &[Position] {
        &self.order
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// `(start, length)` runs into `order`, one per step.
    pub fn steps(&self) -> &[(usize, usize)] {
        &self.steps
    }

    pub fn step_positions(&self, step: usize) -> &[Position] {
        let (start, len) = self.steps[step];
        &self.order[start..start + len]
    }

    /// Sequence slots of the tokens generated in `step`.
    pub fn step_slots(&self, step: usize) -> Range<usize> {
        let (start, len) = self.steps[step];
        start + 1..start + len + 1
    }

    pub fn step_of(&self, p: &Position) -> Result<usize> {
        if !self.shape.contains(p.coords()) {
            return Err(Error::OutOfBounds(p.0.clone()));
        }
        Ok(p.step())
    }

    /// Step of a sequence slot; the condition slot shares step 0 semantics
    /// only through the mask rules and returns `None` here.
    pub fn slot_step(&self, slot: usize) -> Option<usize> {
        (slot != CONDITION_SLOT).then(|| self.order[slot - 1].step())
    }

    pub fn slot_of(&self, p: &Position) -> usize {
        self.rank[self.shape.flat_index(p)] + 1
    }

    pub fn position_of_slot(&self, slot: usize) -> Option<&Position> {
        slot.checked_sub(1).map(|j| &self.order[j])
    }

    /// Sequence length including the condition slot.
    pub fn seq_len(&self) -> usize {
        self.order.len() + 1
    }

    pub fn predecessors(&self, p: &Position) -> &[(Position, usize)] {
        &self.preds[self.rank[self.shape.flat_index(p)]]
    }

    /// Text dump: a `shape=` header followed by one line per step.
    pub fn dump(&self) -> String {
        let mut out = format!("shape={}\n", self.shape);
        for s in 0..self.num_steps() {
            write!(out, "step {s}:").unwrap();
            for p in self.step_positions(s) {
                write!(out, " {p}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Supervision routing for NAR training.
///
/// The first `d` entries route the condition slot through every axis to the
/// origin; then, for each source slot in sequence order, one entry per axis
/// whose neighbor stays in bounds.
pub fn target_table(schedule: &Schedule) -> Vec<TargetEntry> {
    let shape = schedule.shape();
    let origin_slot = schedule.slot_of(&shape.origin());
    let mut table: Vec<TargetEntry> = (0..shape.ndim())
        .map(|axis| TargetEntry {
            source: CONDITION_SLOT,
            axis,
            target: origin_slot,
        })
        .collect();
    for (j, p) in schedule.order().iter().enumerate() {
        for axis in 0..shape.ndim() {
            if let Some(next) = shape.neighbor(p, axis) {
                table.push(TargetEntry {
                    source: j + 1,
                    axis,
                    target: schedule.slot_of(&next),
                });
            }
        }
    }
    table
}
