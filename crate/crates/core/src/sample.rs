//! Generation loops.
//!
//! NAR decoding runs one forward pass per Manhattan step. Pass 1 feeds the
//! condition and predicts the origin; every later pass feeds the tokens of
//! the previous step and predicts the whole next step, routing each head's
//! logits to the neighbor along its axis. A position reachable from several
//! decoded neighbors receives one contribution per neighbor; contributions
//! are guided (CFG) individually and then mixed.

use std::ops::Range;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridShape, TokenGrid};
use crate::mask::AttentionMask;
use crate::model::{
    forward_incremental, forward_logits, log_softmax, KvCache, Mode, ModelParams, SequencePlan,
    SlotInput,
};
use crate::numerics::{Scalar, Tensor};

pub const IMAGE_CFG_SCALE: f64 = 2.0;
pub const VIDEO_CFG_SCALE: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub temperature: f64,
    /// Keep only the `top_k` largest logits; 0 disables the filter.
    pub top_k: usize,
    pub cfg_scale: f64,
    /// Take the argmax instead of sampling.
    #[serde(default)]
    pub greedy: bool,
    pub seed: u64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            top_k: 0,
            cfg_scale: IMAGE_CFG_SCALE,
            greedy: false,
            seed: 0,
        }
    }
}

impl SamplingConfig {
    /// Defaults for a grid: guidance 2.0 for images, 1.25 for videos.
    pub fn for_shape(shape: &GridShape, seed: u64) -> Self {
        Self {
            cfg_scale: if shape.ndim() == 3 {
                VIDEO_CFG_SCALE
            } else {
                IMAGE_CFG_SCALE
            },
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "temperature {} must be positive",
                self.temperature
            )));
        }
        if self.top_k > vocab_size {
            return Err(Error::InvalidConfig(format!(
                "top_k {} exceeds vocabulary {vocab_size}",
                self.top_k
            )));
        }
        if !(self.cfg_scale >= 0.0 && self.cfg_scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "cfg_scale {} must be non-negative",
                self.cfg_scale
            )));
        }
        Ok(())
    }

    fn guided(&self) -> bool {
        self.cfg_scale != 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationStats {
    pub forward_passes: usize,
    pub tokens_generated: usize,
    pub step_wall_ms: Vec<f64>,
}

/// Log-domain ensemble: the mean of log-softmax-normalized contributions.
pub fn mix_logits(contributions: &[&[f64]]) -> Result<Vec<f64>> {
    let first = contributions
        .first()
        .ok_or_else(|| Error::InvalidArgument("no contributions to mix".into()))?;
    let n = first.len();
    if let Some(bad) = contributions.iter().find(|c| c.len() != n) {
        return Err(Error::ShapeMismatch(format!(
            "contribution of {} logits, expected {n}",
            bad.len()
        )));
    }
    let mut out = vec![0.0; n];
    for c in contributions {
        for (o, lp) in out.iter_mut().zip(log_softmax(c)) {
            *o += lp;
        }
    }
    let inv = 1.0 / contributions.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    Ok(out)
}

/// `uncond + scale * (cond - uncond)`; scales 1 and 0 return exact copies.
pub fn apply_cfg(cond: &[f64], uncond: &[f64], scale: f64) -> Result<Vec<f64>> {
    if cond.len() != uncond.len() {
        return Err(Error::ShapeMismatch(format!(
            "cond {} vs uncond {}",
            cond.len(),
            uncond.len()
        )));
    }
    Ok(if scale == 1.0 {
        cond.to_vec()
    } else if scale == 0.0 {
        uncond.to_vec()
    } else {
        cond.iter()
            .zip(uncond)
            .map(|(&c, &u)| u + scale * (c - u))
            .collect()
    })
}

fn argmax(logits: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &x) in logits.iter().enumerate() {
        if x.is_nan() {
            continue;
        }
        match best {
            Some(b) if logits[b] >= x => {}
            _ => best = Some(i),
        }
    }
    best.filter(|&b| logits[b] > f64::NEG_INFINITY)
}

/// Draws a token from `logits` after temperature scaling and top-k filtering.
pub fn sample_token<R: Rng + ?Sized>(
    logits: &[f64],
    config: &SamplingConfig,
    rng: &mut R,
) -> Result<u16> {
    if logits.iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
        return Err(Error::NonFinite("logits".into()));
    }
    let best =
        argmax(logits).ok_or_else(|| Error::InvalidArgument("every logit is masked".into()))?;
    if config.greedy || config.top_k == 1 {
        return Ok(best as u16);
    }
    let inv_t = 1.0 / config.temperature;
    let mut scaled: Vec<f64> = logits.iter().map(|&x| x * inv_t).collect();
    if config.top_k > 0 && config.top_k < scaled.len() {
        let mut idx: Vec<usize> = (0..scaled.len()).collect();
        idx.sort_by(|&a, &b| scaled[b].total_cmp(&scaled[a]).then(a.cmp(&b)));
        for &i in &idx[config.top_k..] {
            scaled[i] = f64::NEG_INFINITY;
        }
    }
    let max = scaled[best];
    let weights: Vec<f64> = scaled.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return Ok(i as u16);
        }
        u -= w;
    }
    // Rounding left a sliver of mass: return the last token with weight.
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap_or(best) as u16)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generator keyed by `(seed, sample, step, position)`; the draw for a
/// position does not depend on evaluation order.
pub fn position_rng(seed: u64, sample: usize, step: usize, flat_index: usize) -> ChaCha8Rng {
    let mut h = splitmix64(seed);
    for part in [sample as u64, step as u64, flat_index as u64] {
        h = splitmix64(h ^ part);
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn row_f64<T: Scalar>(t: &Tensor<T>, r: usize) -> Vec<f64> {
    t.row(r).iter().map(|x| x.as_f64()).collect()
}

/// Runs one forward pass over new slots `slots` of every sequence and
/// returns per-head logits for those slots (sequence-major).
trait Feeder<T> {
    fn feed(&mut self, inputs: &[SlotInput], slots: Range<usize>) -> Result<Vec<Tensor<T>>>;
}

struct Cached<'p, T> {
    params: &'p ModelParams<T>,
    mask: &'p AttentionMask,
    cache: KvCache<T>,
}

impl<T: Scalar> Feeder<T> for Cached<'_, T> {
    fn feed(&mut self, inputs: &[SlotInput], slots: Range<usize>) -> Result<Vec<Tensor<T>>> {
        let rows = self.mask.submask(slots.clone(), slots.end);
        forward_incremental(self.params, inputs, &rows, &mut self.cache)
    }
}

/// Reference path: recomputes the whole processed prefix every pass.
struct Recompute<'p, T> {
    params: &'p ModelParams<T>,
    mask: &'p AttentionMask,
    history: Vec<Vec<SlotInput>>,
}

impl<T: Scalar> Feeder<T> for Recompute<'_, T> {
    fn feed(&mut self, inputs: &[SlotInput], slots: Range<usize>) -> Result<Vec<Tensor<T>>> {
        let seqs = self.history.len();
        let q = slots.len();
        for (s, hist) in self.history.iter_mut().enumerate() {
            if hist.len() != slots.start {
                return Err(Error::CacheDesync("history length".into()));
            }
            hist.extend_from_slice(&inputs[s * q..(s + 1) * q]);
        }
        let all: Vec<SlotInput> = self.history.iter().flatten().cloned().collect();
        let mask = self.mask.submask(0..slots.end, slots.end);
        let logits = forward_logits(self.params, &all, &mask, seqs)?;
        let d = logits[0].cols();
        Ok(logits
            .into_iter()
            .map(|t| {
                let mut data = Vec::with_capacity(seqs * q * d);
                for s in 0..seqs {
                    for slot in slots.clone() {
                        data.extend_from_slice(t.row(s * slots.end + slot));
                    }
                }
                Tensor::new(&[seqs * q, d], data).expect("row count")
            })
            .collect())
    }
}

fn check_generate_args<T: Scalar>(
    params: &ModelParams<T>,
    classes: &[usize],
    shape: &GridShape,
    config: &SamplingConfig,
) -> Result<()> {
    let mc = params.config();
    if &mc.shape != shape {
        return Err(Error::ShapeMismatch(format!(
            "requested {shape}, model trained for {}",
            mc.shape
        )));
    }
    if classes.is_empty() {
        return Err(Error::InvalidArgument("no samples requested".into()));
    }
    if let Some(c) = classes.iter().find(|&&c| c >= mc.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "class {c} for {} classes",
            mc.num_classes
        )));
    }
    config.validate(mc.vocab_size)
}

/// Condition slots for every sequence: the conditional batch, then (when
/// guided) the null-class twins.
fn condition_inputs(classes: &[usize], null_class: usize, guided: bool) -> Vec<SlotInput> {
    let mut v: Vec<SlotInput> = classes
        .iter()
        .map(|&class| SlotInput::Condition { class })
        .collect();
    if guided {
        v.extend(
            classes
                .iter()
                .map(|_| SlotInput::Condition { class: null_class }),
        );
    }
    v
}

/// Guided logits for one contribution of sample `b`.
fn guided_row<T: Scalar>(
    logits: &Tensor<T>,
    b: usize,
    batch: usize,
    q: usize,
    j: usize,
    config: &SamplingConfig,
) -> Result<Vec<f64>> {
    let cond = row_f64(logits, b * q + j);
    if !config.guided() {
        return Ok(cond);
    }
    let uncond = row_f64(logits, (batch + b) * q + j);
    apply_cfg(&cond, &uncond, config.cfg_scale)
}

fn run_nar<T: Scalar, F: Feeder<T>>(
    params: &ModelParams<T>,
    plan: &SequencePlan,
    classes: &[usize],
    config: &SamplingConfig,
    feeder: &mut F,
) -> Result<(Vec<TokenGrid>, GenerationStats)> {
    let mc = params.config();
    let schedule = plan.schedule().expect("NAR plan");
    let shape = schedule.shape();
    let batch = classes.len();
    let guided = config.guided();
    let mut grids = vec![TokenGrid::filled(shape.clone(), 0); batch];
    let mut stats = GenerationStats {
        forward_passes: 0,
        tokens_generated: 0,
        step_wall_ms: Vec::with_capacity(schedule.num_steps()),
    };

    // Pass 1: the condition predicts the origin through every axis head.
    let start = Instant::now();
    let inputs = condition_inputs(classes, mc.null_class(), guided);
    let logits = feeder.feed(&inputs, 0..1)?;
    stats.forward_passes += 1;
    let origin = shape.origin();
    let flat = shape.flat_index(&origin);
    for (b, grid) in grids.iter_mut().enumerate() {
        let rows = (0..shape.ndim())
            .map(|axis| guided_row(&logits[mc.head_for_axis(axis)], b, batch, 1, 0, config))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        let mixed = mix_logits(&refs)?;
        let mut rng = position_rng(config.seed, b, 0, flat);
        grid.set(&origin, sample_token(&mixed, config, &mut rng)?);
        stats.tokens_generated += 1;
    }
    stats.step_wall_ms.push(start.elapsed().as_secs_f64() * 1e3);

    for step in 1..schedule.num_steps() {
        let start = Instant::now();
        let fed = step - 1;
        let slots = schedule.step_slots(fed);
        let fed_positions = schedule.step_positions(fed);
        let q = fed_positions.len();
        let seqs = if guided { 2 * batch } else { batch };
        let mut inputs = Vec::with_capacity(seqs * q);
        for s in 0..seqs {
            let grid = &grids[s % batch];
            inputs.extend(fed_positions.iter().map(|p| SlotInput::Token {
                token: grid.get(p),
                pos: p.clone(),
            }));
        }
        let logits = feeder.feed(&inputs, slots.clone())?;
        stats.forward_passes += 1;

        for target in schedule.step_positions(step) {
            let flat = shape.flat_index(target);
            let preds = schedule.predecessors(target);
            for (b, grid) in grids.iter_mut().enumerate() {
                let rows = preds
                    .iter()
                    .map(|(src, axis)| {
                        let j = schedule.slot_of(src) - slots.start;
                        guided_row(&logits[mc.head_for_axis(*axis)], b, batch, q, j, config)
                    })
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
                let mixed = mix_logits(&refs)?;
                let mut rng = position_rng(config.seed, b, step, flat);
                grid.set(target, sample_token(&mixed, config, &mut rng)?);
                stats.tokens_generated += 1;
            }
        }
        stats.step_wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((grids, stats))
}

fn nar_setup<T: Scalar>(
    params: &ModelParams<T>,
    classes: &[usize],
    shape: &GridShape,
    config: &SamplingConfig,
) -> Result<SequencePlan> {
    if !params.config().mode.is_nar() {
        return Err(Error::ModeMismatch(
            "NAR generation needs a NAR model".into(),
        ));
    }
    check_generate_args(params, classes, shape, config)?;
    Ok(SequencePlan::nar(shape))
}

fn num_sequences(classes: &[usize], config: &SamplingConfig) -> usize {
    if config.guided() {
        2 * classes.len()
    } else {
        classes.len()
    }
}

/// Generates one grid per entry of `classes` in a single batched decode.
pub fn generate_batch<T: Scalar>(
    params: &ModelParams<T>,
    classes: &[usize],
    shape: &GridShape,
    config: &SamplingConfig,
) -> Result<(Vec<TokenGrid>, GenerationStats)> {
    let plan = nar_setup(params, classes, shape, config)?;
    let mut feeder = Cached {
        params,
        mask: plan.mask(),
        cache: KvCache::new(params.config(), num_sequences(classes, config)),
    };
    run_nar(params, &plan, classes, config, &mut feeder)
}

pub fn generate<T: Scalar>(
    params: &ModelParams<T>,
    class: usize,
    shape: &GridShape,
    config: &SamplingConfig,
) -> Result<(TokenGrid, GenerationStats)> {
    let (mut grids, stats) = generate_batch(params, &[class], shape, config)?;
    Ok((grids.pop().expect("one grid"), stats))
}

/// Same decode as [`generate_batch`] without a KV cache: every pass reruns
/// the full processed prefix under the training mask.
pub fn generate_batch_uncached<T: Scalar>(
    params: &ModelParams<T>,
    classes: &[usize],
    shape: &GridShape,
    config: &SamplingConfig,
) -> Result<(Vec<TokenGrid>, GenerationStats)> {
    let plan = nar_setup(params, classes, shape, config)?;
    let mut feeder = Recompute {
        params,
        mask: plan.mask(),
        history: vec![Vec::new(); num_sequences(classes, config)],
    };
    run_nar(params, &plan, classes, config, &mut feeder)
}

fn run_raster<T: Scalar, F: Feeder<T>>(
    params: &ModelParams<T>,
    plan: &SequencePlan,
    classes: &[usize],
    config: &SamplingConfig,
    feeder: &mut F,
) -> Result<(Vec<TokenGrid>, GenerationStats)> {
    let mc = params.config();
    let shape = &mc.shape;
    let batch = classes.len();
    let guided = config.guided();
    let seqs = if guided { 2 * batch } else { batch };
    let n = shape.num_tokens();
    let mut grids = vec![TokenGrid::filled(shape.clone(), 0); batch];
    let mut stats = GenerationStats {
        forward_passes: 0,
        tokens_generated: 0,
        step_wall_ms: Vec::with_capacity(n),
    };
    for i in 0..n {
        let start = Instant::now();
        let inputs: Vec<SlotInput> = if i == 0 {
            condition_inputs(classes, mc.null_class(), guided)
        } else {
            let p = plan.position(i).expect("token slot");
            (0..seqs)
                .map(|s| SlotInput::Token {
                    token: grids[s % batch].get(p),
                    pos: p.clone(),
                })
                .collect()
        };
        let logits = feeder.feed(&inputs, i..i + 1)?;
        stats.forward_passes += 1;
        let target = plan.position(i + 1).expect("token slot").clone();
        let flat = shape.flat_index(&target);
        for (b, grid) in grids.iter_mut().enumerate() {
            let row = guided_row(&logits[0], b, batch, 1, 0, config)?;
            let mut rng = position_rng(config.seed, b, i, flat);
            grid.set(&target, sample_token(&log_softmax(&row), config, &mut rng)?);
            stats.tokens_generated += 1;
        }
        stats.step_wall_ms.push(start.elapsed().as_secs_f64() * 1e3);
    }
    Ok((grids, stats))
}

fn raster_setup<T: Scalar>(
    params: &ModelParams<T>,
    classes: &[usize],
    shape: &GridShape,
    config: &SamplingConfig,
) -> Result<SequencePlan> {
    if params.config().mode != Mode::Raster {
        return Err(Error::ModeMismatch(
            "raster generation needs a raster model".into(),
        ));
    }
    check_generate_args(params, classes, shape, config)?;
    Ok(SequencePlan::raster(shape))
}

pub fn generate_raster_batch<T: Scalar>(
    params: &ModelParams<T>,
    classes: &[usize],
    shape: &GridShape,
    config: &SamplingConfig,
) -> Result<(Vec<TokenGrid>, GenerationStats)> {
    let plan = raster_setup(params, classes, shape, config)?;
    let mut feeder = Cached {
        params,
        mask: plan.mask(),
        cache: KvCache::new(params.config(), num_sequences(classes, config)),
    };
    run_raster(params, &plan, classes, config, &mut feeder)
}

pub fn generate_raster<T: Scalar>(
    params: &ModelParams<T>,
    class: usize,
    shape: &GridShape,
    config: &SamplingConfig,
) -> Result<(TokenGrid, GenerationStats)> {
    let (mut grids, stats) = generate_raster_batch(params, &[class], shape, config)?;
    Ok((grids.pop().expect("one grid"), stats))
}

pub fn generate_raster_batch_uncached<T: Scalar>(
    params: &ModelParams<T>,
    classes: &[usize],
    shape: &GridShape,
    config: &SamplingConfig,
) -> Result<(Vec<TokenGrid>, GenerationStats)> {
    let plan = raster_setup(params, classes, shape, config)?;
    let mut feeder = Recompute {
        params,
        mask: plan.mask(),
        history: vec![Vec::new(); num_sequences(classes, config)],
    };
    run_raster(params, &plan, classes, config, &mut feeder)
}
