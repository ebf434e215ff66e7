//! Model fixtures shared by the benchmarks.

use nar_core::{GridShape, Mode, ModelConfig, ModelParams};

/// A small model for `dims`, initialized with a fixed seed.
pub fn fixture(mode: Mode, dims: &[usize], embed_dim: usize) -> ModelParams<f32> {
    let config = ModelConfig {
        vocab_size: 64,
        num_classes: 10,
        embed_dim,
        num_blocks: 2,
        num_heads: 4,
        mode,
        shape: GridShape::new(dims).expect("valid dims"),
        dropout: 0.0,
    };
    ModelParams::init(&config, 0).expect("valid config")
}
