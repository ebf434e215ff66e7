//! Procedural token grids with local structure.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, Position, TokenGrid};
use crate::model::Example;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Gibbs-sampled q-state Potts model. The coupling along the last axis is
    /// `coupling`; along the other axes it is `coupling * anisotropy`.
    Potts {
        coupling: f64,
        sweeps: usize,
        #[serde(default = "one")]
        anisotropy: f64,
    },
    /// Up to `max_rects` class-colored rectangles over background token 0.
    /// With `bars` every rectangle spans the full last axis.
    Shapes {
        #[serde(default = "three")]
        max_rects: usize,
        #[serde(default)]
        bars: bool,
    },
}

fn one() -> f64 {
    1.0
}

fn three() -> usize {
    3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub shape: GridShape,
    pub vocab_size: usize,
    pub num_classes: usize,
    pub generator: Generator,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.vocab_size > u16::MAX as usize + 1 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} out of range",
                self.vocab_size
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("num_classes must be positive".into()));
        }
        match &self.generator {
            Generator::Potts {
                coupling,
                anisotropy,
                ..
            } => {
                if !coupling.is_finite() || !anisotropy.is_finite() {
                    return Err(Error::InvalidConfig("non-finite coupling".into()));
                }
            }
            Generator::Shapes { max_rects, .. } => {
                if !(1..=3).contains(max_rects) {
                    return Err(Error::InvalidConfig(format!(
                        "max_rects {max_rects} not in 1..=3"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let spec: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Axis-aligned box `[lo, hi)` filled with `token`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rect {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub token: u16,
}

/// Paints `rects` in order over a `background` grid; later boxes win.
pub fn rasterize_rects(shape: &GridShape, background: u16, rects: &[Rect]) -> TokenGrid {
    let mut grid = TokenGrid::filled(shape.clone(), background);
    for p in shape.raster_positions() {
        let hit = rects.iter().rev().find(|r| {
            p.coords()
                .iter()
                .zip(r.lo.iter().zip(&r.hi))
                .all(|(&c, (&lo, &hi))| lo <= c && c < hi)
        });
        if let Some(r) = hit {
            grid.set(&p, r.token);
        }
    }
    grid
}

fn sample_rng(spec: &SyntheticSpec, class: usize, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(seed);
    rng.set_word_pos((class as u128) << 64);
    rng
}

fn gen_shapes(
    spec: &SyntheticSpec,
    class: usize,
    max_rects: usize,
    bars: bool,
    rng: &mut ChaCha8Rng,
) -> TokenGrid {
    let dims = spec.shape.dims();
    let n = rng.random_range(1..=max_rects);
    let colors = (spec.vocab_size - 1) as u64;
    let rects: Vec<Rect> = (0..n)
        .map(|k| {
            let mut lo = Vec::with_capacity(dims.len());
            let mut hi = Vec::with_capacity(dims.len());
            for (axis, &len) in dims.iter().enumerate() {
                if bars && axis == dims.len() - 1 {
                    lo.push(0);
                    hi.push(len);
                } else {
                    let a = rng.random_range(0..len);
                    let b = rng.random_range(0..len);
                    lo.push(a.min(b));
                    hi.push(a.max(b) + 1);
                }
            }
            let token = 1 + ((class as u64 * 3 + k as u64) % colors) as u16;
            Rect { lo, hi, token }
        })
        .collect();
    rasterize_rects(&spec.shape, 0, &rects)
}

fn gen_potts(
    spec: &SyntheticSpec,
    class: usize,
    coupling: f64,
    sweeps: usize,
    anisotropy: f64,
    rng: &mut ChaCha8Rng,
) -> TokenGrid {
    let shape = &spec.shape;
    let q = spec.vocab_size;
    let scale = 1.0 + class as f64 / spec.num_classes as f64;
    let d = shape.ndim();
    let axis_coupling: Vec<f64> = (0..d)
        .map(|a| {
            let j = coupling * scale;
            if a + 1 == d {
                j
            } else {
                j * anisotropy
            }
        })
        .collect();
    let tokens: Vec<u16> = (0..shape.num_tokens())
        .map(|_| rng.random_range(0..q) as u16)
        .collect();
    let mut grid = TokenGrid::new(shape.clone(), tokens).expect("sized to shape");
    let positions: Vec<Position> = shape.raster_positions().collect();
    let mut energy = vec![0.0f64; q];
    let mut weights = vec![0.0f64; q];
    for _ in 0..sweeps {
        for p in &positions {
            energy.iter_mut().for_each(|e| *e = 0.0);
            for (axis, &j) in axis_coupling.iter().enumerate() {
                let c = p.coords()[axis];
                let mut neighbor = |coord: usize| {
                    let mut n = p.coords().to_vec();
                    n[axis] = coord;
                    energy[grid.get(&Position(n)) as usize] += j;
                };
                if c > 0 {
                    neighbor(c - 1);
                }
                if c + 1 < shape.dims()[axis] {
                    neighbor(c + 1);
                }
            }
            let max = energy.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            for (w, e) in weights.iter_mut().zip(&energy) {
                *w = (e - max).exp();
            }
            let total: f64 = weights.iter().sum();
            let mut u = rng.random::<f64>() * total;
            let mut pick = q - 1;
            for (s, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = s;
                    break;
                }
                u -= w;
            }
            grid.set(p, pick as u16);
        }
    }
    grid
}

/// One grid, deterministic in `(spec, class, seed)`.
pub fn gen_synthetic(spec: &SyntheticSpec, class: usize, seed: u64) -> TokenGrid {
    let mut rng = sample_rng(spec, class, seed);
    match spec.generator {
        Generator::Potts {
            coupling,
            sweeps,
            anisotropy,
        } => gen_potts(spec, class, coupling, sweeps, anisotropy, &mut rng),
        Generator::Shapes { max_rects, bars } => gen_shapes(spec, class, max_rects, bars, &mut rng),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Seed of sample `index` in a split. Train seeds are even and eval seeds
/// odd, so the two never meet.
pub fn split_seed(split: Split, index: u64) -> u64 {
    match split {
        Split::Train => index * 2,
        Split::Eval => index * 2 + 1,
    }
}

/// `count` examples starting at `start`, classes cycling through the dataset's
/// classes.
pub fn make_examples(spec: &SyntheticSpec, split: Split, start: u64, count: usize) -> Vec<Example> {
    (start..start + count as u64)
        .map(|i| {
            let class = (i % spec.num_classes as u64) as usize;
            Example {
                grid: gen_synthetic(spec, class, split_seed(split, i)),
                class,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(generator: Generator, vocab: usize) -> SyntheticSpec {
        SyntheticSpec {
            shape: GridShape::new(&[8, 8]).unwrap(),
            vocab_size: vocab,
            num_classes: 4,
            generator,
            seed: 3,
        }
    }

    fn potts(coupling: f64) -> Generator {
        Generator::Potts {
            coupling,
            sweeps: 5,
            anisotropy: 1.0,
        }
    }

    #[test]
    fn covering_rect_gives_constant_grid() {
        let shape = GridShape::new(&[4, 5]).unwrap();
        let r = Rect {
            lo: vec![0, 0],
            hi: vec![4, 5],
            token: 7,
        };
        let g = rasterize_rects(&shape, 0, &[r]);
        assert!(g.tokens().iter().all(|&t| t == 7));
    }

    #[test]
    fn deterministic() {
        let s = spec(
            Generator::Shapes {
                max_rects: 3,
                bars: false,
            },
            16,
        );
        assert_eq!(gen_synthetic(&s, 1, 9), gen_synthetic(&s, 1, 9));
        let p = spec(potts(0.8), 4);
        assert_eq!(gen_synthetic(&p, 2, 9), gen_synthetic(&p, 2, 9));
        assert_ne!(gen_synthetic(&p, 2, 9), gen_synthetic(&p, 2, 10));
    }

    #[test]
    fn zero_coupling_is_uniform() {
        let vocab = 8;
        let s = spec(potts(0.0), vocab);
        let mut counts = vec![0usize; vocab];
        for seed in 0..1000 {
            for &t in gen_synthetic(&s, (seed % 4) as usize, seed).tokens() {
                counts[t as usize] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let entropy: f64 = counts
            .iter()
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        let ln_v = (vocab as f64).ln();
        assert!((entropy - ln_v).abs() / ln_v < 0.05, "entropy {entropy}");
    }

    #[test]
    fn strong_coupling_agrees_with_neighbors() {
        let vocab = 4;
        let s = spec(potts(2.0), vocab);
        let (mut agree, mut pairs) = (0usize, 0usize);
        for seed in 0..100 {
            let g = gen_synthetic(&s, 0, seed);
            for p in s.shape.raster_positions() {
                for axis in 0..2 {
                    if let Some(n) = s.shape.neighbor(&p, axis) {
                        pairs += 1;
                        agree += (g.get(&p) == g.get(&n)) as usize;
                    }
                }
            }
        }
        assert!(agree as f64 / pairs as f64 > 1.0 / vocab as f64);
    }

    #[test]
    fn bars_span_last_axis() {
        let s = spec(
            Generator::Shapes {
                max_rects: 2,
                bars: true,
            },
            16,
        );
        for seed in 0..20 {
            let g = gen_synthetic(&s, 1, seed);
            for r in 0..8 {
                let row: Vec<u16> = (0..8).map(|c| g.get(&Position(vec![r, c]))).collect();
                assert!(row.iter().all(|&t| t == row[0]));
            }
        }
    }

    #[test]
    fn splits_are_disjoint() {
        for i in 0..1000 {
            for j in 0..1000 {
                assert_ne!(split_seed(Split::Train, i), split_seed(Split::Eval, j));
            }
        }
    }

    #[test]
    fn spec_json_round_trip() {
        let s = spec(potts(0.5), 4);
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<SyntheticSpec>(&text).unwrap(), s);
        let mut bad = s.clone();
        bad.vocab_size = 1;
        assert!(bad.validate().is_err());
    }
}
