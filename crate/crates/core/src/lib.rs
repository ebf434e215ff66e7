//! Neighboring autoregressive generation over 2-D and 3-D token grids.
//!
//! Tokens are decoded in order of Manhattan distance from the origin. All
//! positions at one distance come out of a single forward pass, so an
//! `n x n` grid needs `2n - 1` passes instead of `n^2`.

pub mod bench;
pub mod data;
pub mod error;
pub mod grid;
pub mod mask;
pub mod model;
pub mod numerics;
pub mod render;
pub mod sample;
pub mod schedule;
pub mod tokens;
pub mod train;

pub use error::{Error, Result};
pub use grid::{manhattan_distance, step_count, GridShape, Position, TokenGrid};
pub use mask::{build_mask, AttentionMask};
pub use model::{Mode, ModelConfig, ModelParams};
pub use sample::{GenerationStats, SamplingConfig};
pub use schedule::{build_schedule, target_table, Schedule, TargetEntry};
