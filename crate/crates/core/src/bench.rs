//! NAR vs raster generation benchmark.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{step_count, GridShape};
use crate::model::{Mode, ModelConfig, ModelParams};
use crate::numerics::Scalar;
use crate::sample::{generate_batch, generate_raster_batch, SamplingConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub mode: Mode,
    pub batch_size: usize,
    pub forward_passes_per_sample: usize,
    pub wall_ms_per_sample: f64,
    pub samples_per_sec: f64,
    pub peak_memory_bytes: usize,
    pub timed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub shape: GridShape,
    pub repetitions: usize,
    pub warmup: usize,
    pub entries: Vec<BenchEntry>,
}

impl BenchReport {
    pub fn entry(&self, mode: Mode, batch_size: usize) -> Option<&BenchEntry> {
        self.entries
            .iter()
            .find(|e| e.mode == mode && e.batch_size == batch_size)
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Rough peak bytes for one batched generation: weights, the KV cache of
/// every sequence (including CFG twins) and one pass of activations.
pub fn memory_estimate(config: &ModelConfig, num_params: usize, sequences: usize) -> usize {
    let d = config.embed_dim;
    let seq = config.shape.num_tokens() + 1;
    let blocks = config.num_blocks + config.num_decoding_heads();
    let cache = 2 * blocks * seq * d * sequences;
    let widest = config
        .shape
        .num_tokens()
        .min(config.shape.dims().iter().sum());
    let activations = sequences * widest * (config.ffn_dim() + 4 * d + config.vocab_size);
    4 * (num_params + cache + activations)
}

fn backbone_matches(a: &ModelConfig, b: &ModelConfig) -> bool {
    a.vocab_size == b.vocab_size
        && a.num_classes == b.num_classes
        && a.embed_dim == b.embed_dim
        && a.num_blocks == b.num_blocks
        && a.num_heads == b.num_heads
        && a.shape == b.shape
}

fn time_mode<T: Scalar>(
    params: &ModelParams<T>,
    shape: &GridShape,
    batch_size: usize,
    repetitions: usize,
    warmup: usize,
    sampling: &SamplingConfig,
) -> Result<BenchEntry> {
    let mode = params.config().mode;
    let expected = if mode.is_nar() {
        step_count(shape)
    } else {
        shape.num_tokens()
    };
    let classes: Vec<usize> = (0..batch_size)
        .map(|i| i % params.config().num_classes)
        .collect();
    let mut times = Vec::with_capacity(repetitions);
    for run in 0..warmup + repetitions {
        let start = Instant::now();
        let (_, stats) = if mode.is_nar() {
            generate_batch(params, &classes, shape, sampling)?
        } else {
            generate_raster_batch(params, &classes, shape, sampling)?
        };
        let ms = start.elapsed().as_secs_f64() * 1e3;
        if stats.forward_passes != expected {
            return Err(Error::InvalidArgument(format!(
                "{mode:?} took {} forward passes, expected {expected}",
                stats.forward_passes
            )));
        }
        if run >= warmup {
            times.push(ms);
        }
    }
    let per_sample = median(&times) / batch_size as f64;
    let sequences = if sampling.cfg_scale != 1.0 {
        2 * batch_size
    } else {
        batch_size
    };
    Ok(BenchEntry {
        mode,
        batch_size,
        forward_passes_per_sample: expected,
        wall_ms_per_sample: per_sample,
        samples_per_sec: 1e3 / per_sample,
        peak_memory_bytes: memory_estimate(params.config(), params.num_params(), sequences),
        timed_runs: times.len(),
    })
}

/// Times batched generation for both models at every batch size. Medians
/// exclude `warmup` runs. Forward-pass counts are checked against the
/// closed forms; wall-clock is only reported.
pub fn bench<T: Scalar>(
    nar: &ModelParams<T>,
    raster: &ModelParams<T>,
    shape: &GridShape,
    batch_sizes: &[usize],
    repetitions: usize,
    warmup: usize,
    sampling: &SamplingConfig,
) -> Result<BenchReport> {
    if !nar.config().mode.is_nar() || raster.config().mode != Mode::Raster {
        return Err(Error::ModeMismatch(
            "bench needs a NAR model and a raster model".into(),
        ));
    }
    if !backbone_matches(nar.config(), raster.config()) {
        return Err(Error::InvalidConfig(
            "NAR and raster checkpoints have different backbones".into(),
        ));
    }
    if repetitions == 0 || batch_sizes.is_empty() || batch_sizes.contains(&0) {
        return Err(Error::InvalidArgument(
            "need positive repetitions and batch sizes".into(),
        ));
    }
    let mut entries = Vec::with_capacity(2 * batch_sizes.len());
    for &b in batch_sizes {
        entries.push(time_mode(nar, shape, b, repetitions, warmup, sampling)?);
        entries.push(time_mode(raster, shape, b, repetitions, warmup, sampling)?);
    }
    Ok(BenchReport {
        shape: shape.clone(),
        repetitions,
        warmup,
        entries,
    })
}
