//! Token-grid geometry.
//!
//! Grids are two-dimensional `(rows, cols)` or three-dimensional
//! `(time, rows, cols)`. Positions are flattened in row-major order
//! wherever a linear index is needed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Extents of a 2-D or 3-D token grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct GridShape {
    dims: Vec<usize>,
}

impl GridShape {
    pub fn new(dims: &[usize]) -> Result<Self> {
        if !(2..=3).contains(&dims.len()) {
            return Err(Error::InvalidShape(format!(
                "expected 2 or 3 dimensions, got {}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::InvalidShape(format!("zero extent in {dims:?}")));
        }
        Ok(Self {
            dims: dims.to_vec(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn contains(&self, coords: &[usize]) -> bool {
        coords.len() == self.dims.len() && coords.iter().zip(&self.dims).all(|(c, d)| c < d)
    }

    /// Row-major linear index of an in-bounds position.
    pub fn flat_index(&self, p: &Position) -> usize {
        p.coords()
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&c, &d)| acc * d + c)
    }

    pub fn position_at(&self, mut index: usize) -> Position {
        let mut coords = vec![0; self.dims.len()];
        for (c, &d) in coords.iter_mut().zip(&self.dims).rev() {
            *c = index % d;
            index /= d;
        }
        Position(coords)
    }

    /// All positions in row-major (raster) order.
    pub fn raster_positions(&self) -> impl Iterator<Item = Position> + '_ {
        (0..self.num_tokens()).map(|i| self.position_at(i))
    }

    pub fn origin(&self) -> Position {
        Position(vec![0; self.dims.len()])
    }

    /// `p + unit(axis)` when it stays inside the grid.
    pub fn neighbor(&self, p: &Position, axis: usize) -> Option<Position> {
        let mut coords = p.0.clone();
        coords[axis] += 1;
        (coords[axis] < self.dims[axis]).then_some(Position(coords))
    }
}

impl TryFrom<Vec<usize>> for GridShape {
    type Error = Error;

    fn try_from(dims: Vec<usize>) -> Result<Self> {
        GridShape::new(&dims)
    }
}

impl From<GridShape> for Vec<usize> {
    fn from(shape: GridShape) -> Self {
        shape.dims
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.dims.iter().map(|d| d.to_string()).collect();
        f.write_str(&parts.join("x"))
    }
}

impl FromStr for GridShape {
    type Err = Error;

    /// Parses `16x16` or `4x16x16`.
    fn from_str(s: &str) -> Result<Self> {
        let dims = s
            .split('x')
            .map(|part| {
                part.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::InvalidShape(format!("cannot parse {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        GridShape::new(&dims)
    }
}

/// Integer coordinates of a grid cell. Ordering is lexicographic.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Position(pub Vec<usize>);

impl Position {
    pub fn new(coords: &[usize]) -> Self {
        Position(coords.to_vec())
    }

    pub fn coords(&self) -> &[usize] {
        &self.0
    }

    pub fn ndim(&self) -> usize {
        self.0.len()
    }

    pub fn is_origin(&self) -> bool {
        self.0.iter().all(|&c| c == 0)
    }

    /// Distance from the all-zero corner, i.e. the generation step.
    pub fn step(&self) -> usize {
        self.0.iter().sum()
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|c| c.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

pub fn manhattan_distance(p: &Position, q: &Position) -> Result<usize> {
    if p.ndim() != q.ndim() {
        return Err(Error::DimMismatch {
            left: p.ndim(),
            right: q.ndim(),
        });
    }
    Ok(p.0.iter().zip(&q.0).map(|(&a, &b)| a.abs_diff(b)).sum())
}

/// Number of Manhattan-distance steps needed to cover `shape`.
pub fn step_count(shape: &GridShape) -> usize {
    shape.dims().iter().sum::<usize>() - shape.ndim() + 1
}

/// Positions one step closer to the origin, each tagged with the axis that
/// was decremented. Ordered by axis.
pub fn predecessors(p: &Position, shape: &GridShape) -> Result<Vec<(Position, usize)>> {
    if !shape.contains(p.coords()) {
        return Err(Error::OutOfBounds(p.0.clone()));
    }
    Ok((0..p.ndim())
        .filter(|&axis| p.0[axis] > 0)
        .map(|axis| {
            let mut coords = p.0.clone();
            coords[axis] -= 1;
            (Position(coords), axis)
        })
        .collect())
}

/// Discrete contents of a grid, stored in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    shape: GridShape,
    tokens: Vec<u16>,
}

impl TokenGrid {
    pub fn new(shape: GridShape, tokens: Vec<u16>) -> Result<Self> {
        if tokens.len() != shape.num_tokens() {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens for shape {shape}",
                tokens.len()
            )));
        }
        Ok(Self { shape, tokens })
    }

    pub fn filled(shape: GridShape, token: u16) -> Self {
        let tokens = vec![token; shape.num_tokens()];
        Self { shape, tokens }
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn get(&self, p: &Position) -> u16 {
        self.tokens[self.shape.flat_index(p)]
    }

    pub fn set(&mut self, p: &Position, token: u16) {
        let i = self.shape.flat_index(p);
        self.tokens[i] = token;
    }

    pub fn max_token(&self) -> Option<u16> {
        self.tokens.iter().copied().max()
    }
}
