use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridShape;

/// Output-head arrangement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// One decoding head per grid axis.
    Nar,
    /// Near-to-far order with a single head predicting every axis neighbor.
    NarSharedHead,
    /// Raster next-token baseline.
    Raster,
}

impl Mode {
    pub fn is_nar(self) -> bool {
        matches!(self, Mode::Nar | Mode::NarSharedHead)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_classes: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub mode: Mode,
    pub shape: GridShape,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.vocab_size < 2 || self.vocab_size > u16::MAX as usize + 1 {
            return bad(format!("vocab_size {} not in [2, 65536]", self.vocab_size));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.embed_dim == 0
            || self.num_heads == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return bad(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} not in [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Number of decoding heads: one per axis in NAR mode, otherwise one.
    pub fn num_decoding_heads(&self) -> usize {
        match self.mode {
            Mode::Nar => self.shape.ndim(),
            Mode::NarSharedHead | Mode::Raster => 1,
        }
    }

    /// Decoding head that predicts the neighbor along `axis`.
    pub fn head_for_axis(&self, axis: usize) -> usize {
        match self.mode {
            Mode::Nar => axis,
            Mode::NarSharedHead | Mode::Raster => 0,
        }
    }

    /// Row of the class table used for the unconditional branch.
    pub fn null_class(&self) -> usize {
        self.num_classes
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        Self {
            mode,
            ..self.clone()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            num_classes: 2,
            embed_dim: 32,
            num_blocks: 2,
            num_heads: 4,
            mode: Mode::Nar,
            shape: GridShape::new(&[4, 4]).unwrap(),
            dropout: 0.0,
        }
    }

    #[test]
    fn head_counts() {
        let c = base();
        assert_eq!(c.num_decoding_heads(), 2);
        assert_eq!(c.with_mode(Mode::Raster).num_decoding_heads(), 1);
        assert_eq!(c.with_mode(Mode::NarSharedHead).head_for_axis(1), 0);
        let v = ModelConfig {
            shape: GridShape::new(&[2, 3, 3]).unwrap(),
            ..base()
        };
        assert_eq!(v.num_decoding_heads(), 3);
    }

    #[test]
    fn validation() {
        assert!(base().validate().is_ok());
        assert!(ModelConfig {
            num_heads: 5,
            ..base()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            vocab_size: 1,
            ..base()
        }
        .validate()
        .is_err());
        assert!(ModelConfig {
            dropout: 1.0,
            ..base()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = base();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains("\"mode\":\"nar\""));
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
    }
}
