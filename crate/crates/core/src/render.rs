//! PPM rendering of token grids.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Position, TokenGrid};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    colors: Vec<[u8; 3]>,
}

impl Palette {
    /// `vocab_size` random colors; the same seed always gives the same table.
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let colors = (0..vocab_size)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        Self { colors }
    }

    pub fn from_colors(colors: Vec<[u8; 3]>) -> Self {
        Self { colors }
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn color(&self, token: u16) -> Option<[u8; 3]> {
        self.colors.get(token as usize).copied()
    }
}

fn render_frame(
    grid: &TokenGrid,
    palette: &Palette,
    zoom: usize,
    frame: Option<usize>,
) -> Result<Vec<u8>> {
    let dims = grid.shape().dims();
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let header = format!("P6\n{} {}\n255\n", w * zoom, h * zoom);
    let mut out = Vec::with_capacity(header.len() + 3 * h * w * zoom * zoom);
    out.extend_from_slice(header.as_bytes());
    let mut row = Vec::with_capacity(3 * w * zoom);
    for r in 0..h {
        row.clear();
        for c in 0..w {
            let coords = match frame {
                Some(t) => vec![t, r, c],
                None => vec![r, c],
            };
            let token = grid.get(&Position(coords));
            let rgb = palette.color(token).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "token {token} outside a palette of {}",
                    palette.len()
                ))
            })?;
            for _ in 0..zoom {
                row.extend_from_slice(&rgb);
            }
        }
        for _ in 0..zoom {
            out.extend_from_slice(&row);
        }
    }
    Ok(out)
}

/// Binary PPM images, one per frame (a single image for 2-D grids).
pub fn render_grid(grid: &TokenGrid, palette: &Palette, zoom: usize) -> Result<Vec<Vec<u8>>> {
    if zoom == 0 {
        return Err(Error::InvalidArgument("zoom must be positive".into()));
    }
    if grid.shape().ndim() == 3 {
        (0..grid.shape().dims()[0])
            .map(|t| render_frame(grid, palette, zoom, Some(t)))
            .collect()
    } else {
        Ok(vec![render_frame(grid, palette, zoom, None)?])
    }
}

/// Writes `render_grid` output next to `stem`: `stem.ppm`, or
/// `stem_000.ppm`, `stem_001.ppm`, ... for videos.
pub fn write_ppm(
    stem: impl AsRef<Path>,
    grid: &TokenGrid,
    palette: &Palette,
    zoom: usize,
) -> Result<Vec<PathBuf>> {
    let stem = stem.as_ref();
    let images = render_grid(grid, palette, zoom)?;
    let video = grid.shape().ndim() == 3;
    let width = images.len().to_string().len().max(3);
    let mut paths = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let name = match (video, stem.file_name()) {
            (true, Some(n)) => format!("{}_{i:0width$}.ppm", n.to_string_lossy()),
            (false, Some(n)) => format!("{}.ppm", n.to_string_lossy()),
            (_, None) => return Err(Error::InvalidArgument("empty output path".into())),
        };
        let path = stem.with_file_name(name);
        fs::write(&path, img)?;
        paths.push(path);
    }
    Ok(paths)
}
