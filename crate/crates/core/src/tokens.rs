//! Token grid files.
//!
//! Binary `.tokens`:
//!
//! ```text
//! "NARTOK1\0"      8 bytes
//! ndim             u32 LE
//! dims             ndim x u32 LE
//! tokens           u16 LE, row-major
//! ```
//!
//! The JSON form carries the same tokens base64-encoded alongside the
//! sampling metadata.

use std::fs;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, TokenGrid};
use crate::sample::SamplingConfig;

pub const TOKENS_MAGIC: &[u8; 8] = b"NARTOK1\0";

fn token_bytes(grid: &TokenGrid) -> Vec<u8> {
    grid.tokens().iter().flat_map(|t| t.to_le_bytes()).collect()
}

fn grid_from_bytes(shape: GridShape, bytes: &[u8]) -> Result<TokenGrid> {
    if bytes.len() != 2 * shape.num_tokens() {
        return Err(Error::Format(format!(
            "{} token bytes for shape {shape}",
            bytes.len()
        )));
    }
    let tokens = bytes
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    TokenGrid::new(shape, tokens)
}

pub fn encode_tokens(grid: &TokenGrid) -> Vec<u8> {
    let dims = grid.shape().dims();
    let mut out = Vec::with_capacity(12 + 4 * dims.len() + 2 * grid.tokens().len());
    out.extend_from_slice(TOKENS_MAGIC);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&token_bytes(grid));
    out
}

pub fn decode_tokens(bytes: &[u8]) -> Result<TokenGrid> {
    if bytes.len() < 12 || &bytes[..8] != TOKENS_MAGIC {
        return Err(Error::Format("not a token file (bad magic)".into()));
    }
    let u32_at = |i: usize| -> Result<usize> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| Error::Format("truncated header".into()))
    };
    let ndim = u32_at(8)?;
    if !(2..=3).contains(&ndim) {
        return Err(Error::Format(format!("{ndim} dimensions")));
    }
    let dims = (0..ndim)
        .map(|a| u32_at(12 + 4 * a))
        .collect::<Result<Vec<_>>>()?;
    let shape = GridShape::new(&dims).map_err(|e| Error::Format(e.to_string()))?;
    grid_from_bytes(shape, &bytes[12 + 4 * ndim..])
}

pub fn save_tokens(path: impl AsRef<Path>, grid: &TokenGrid) -> Result<()> {
    fs::write(path, encode_tokens(grid))?;
    Ok(())
}

pub fn load_tokens(path: impl AsRef<Path>) -> Result<TokenGrid> {
    decode_tokens(&fs::read(path)?)
}

/// A generated grid with the settings that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub shape: GridShape,
    pub vocab_size: usize,
    pub class: usize,
    pub sampling: SamplingConfig,
    /// Base64 of the little-endian u16 tokens.
    pub tokens: String,
}

impl SampleRecord {
    pub fn new(
        grid: &TokenGrid,
        vocab_size: usize,
        class: usize,
        sampling: SamplingConfig,
    ) -> Self {
        Self {
            shape: grid.shape().clone(),
            vocab_size,
            class,
            sampling,
            tokens: STANDARD.encode(token_bytes(grid)),
        }
    }

    pub fn grid(&self) -> Result<TokenGrid> {
        let bytes = STANDARD
            .decode(&self.tokens)
            .map_err(|e| Error::Format(format!("base64: {e}")))?;
        grid_from_bytes(self.shape.clone(), &bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> TokenGrid {
        let shape = GridShape::new(&[2, 3, 4]).unwrap();
        TokenGrid::new(shape, (0..24).map(|i| i * 1000).collect()).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let g = grid();
        let bytes = encode_tokens(&g);
        assert_eq!(bytes.len(), 8 + 4 + 12 + 48);
        assert_eq!(decode_tokens(&bytes).unwrap(), g);
    }

    #[test]
    fn binary_rejects_damage() {
        let bytes = encode_tokens(&grid());
        assert!(decode_tokens(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_tokens(&bytes[..10]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tokens(&bad).is_err());
    }

    #[test]
    fn json_round_trip() {
        let g = grid();
        let rec = SampleRecord::new(&g, 24000, 3, SamplingConfig::default());
        let text = serde_json::to_string(&rec).unwrap();
        let back: SampleRecord = serde_json::from_str(&text).unwrap();
        assert_eq!(back.grid().unwrap(), g);
    }
}
