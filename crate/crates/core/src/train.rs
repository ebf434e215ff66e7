//! Training loop, held-out evaluation and the head ablation.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{make_examples, Split, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::{
    entry_log_probs, log_softmax, loss_and_grads, Example, Mode, ModelConfig, ModelParams,
    SequencePlan,
};
use crate::numerics::{adam_step, AdamConfig, AdamState, Scalar};
use crate::sample::mix_logits;

fn default_lr() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub data: SyntheticSpec,
    pub batch_size: usize,
    pub total_steps: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default)]
    pub warmup_steps: usize,
    pub eval_interval: usize,
    pub eval_samples: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        if self.batch_size == 0 || self.eval_interval == 0 || self.eval_samples == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, eval_interval and eval_samples must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning rate {}",
                self.learning_rate
            )));
        }
        let (m, d) = (&self.model, &self.data);
        if m.shape != d.shape || m.vocab_size != d.vocab_size || m.num_classes != d.num_classes {
            return Err(Error::InvalidConfig(
                "model and data disagree on shape, vocabulary or classes".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let config: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        config.validate()?;
        Ok(config)
    }

    /// Learning rate at `step` (0-based): linear warmup, then constant.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            self.learning_rate * (step + 1) as f64 / self.warmup_steps as f64
        } else {
            self.learning_rate
        }
    }

    pub fn eval_set(&self) -> Vec<Example> {
        make_examples(&self.data, Split::Eval, 0, self.eval_samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricPoint {
    pub step: usize,
    /// Mean training loss since the previous point.
    pub train_loss: f64,
    pub eval_nll: f64,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Metrics {
    pub points: Vec<MetricPoint>,
    /// Training loss at every optimizer step.
    pub step_losses: Vec<f64>,
}

impl Metrics {
    /// Copy with wall-clock fields zeroed, for comparing runs.
    pub fn without_timing(&self) -> Self {
        let mut m = self.clone();
        m.points.iter_mut().for_each(|p| p.wall_ms = 0.0);
        m
    }

    pub fn final_eval_nll(&self) -> Option<f64> {
        self.points.last().map(|p| p.eval_nll)
    }

    pub fn to_json_lines(&self) -> String {
        self.points
            .iter()
            .map(|p| serde_json::to_string(p).expect("plain struct") + "\n")
            .collect()
    }
}

/// Mean negative log-likelihood per predicted target, in nats.
pub fn eval_nll<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[Example],
    batch_size: usize,
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let plan = SequencePlan::for_config(params.config());
    let batch_size = batch_size.max(1);
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in examples.chunks(batch_size) {
        let lps = entry_log_probs(params, chunk, &plan)?;
        for (ex, rows) in chunk.iter().zip(lps) {
            for (entry, lp) in plan.targets().iter().zip(rows) {
                total -= lp[plan.target_token(&ex.grid, entry) as usize];
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Runs the configured number of Adam steps on fresh training batches.
/// `on_point` sees every metric point as it is recorded.
pub fn train_loop_with(
    config: &TrainConfig,
    mut on_point: impl FnMut(&MetricPoint),
) -> Result<(ModelParams<f32>, Metrics)> {
    config.validate()?;
    let start = Instant::now();
    let mut params = ModelParams::<f32>::init(&config.model, config.seed)?;
    let plan = SequencePlan::for_config(&config.model);
    let eval = config.eval_set();
    let eval_batch = config.batch_size.max(16);
    let mut adam = AdamState::new(params.tensors());
    let mut metrics = Metrics::default();
    let batch = |step: usize| {
        make_examples(
            &config.data,
            Split::Train,
            (step * config.batch_size) as u64,
            config.batch_size,
        )
    };

    let mut record = |metrics: &mut Metrics, step, train_loss, params: &ModelParams<f32>| {
        let point = MetricPoint {
            step,
            train_loss,
            eval_nll: eval_nll(params, &eval, eval_batch)?,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        };
        on_point(&point);
        metrics.points.push(point);
        Ok::<_, Error>(())
    };

    let (initial, _) = loss_and_grads(&params, &batch(0), &plan, None)?;
    record(&mut metrics, 0, initial, &params)?;

    let mut since = 0.0;
    let mut since_count = 0usize;
    for step in 0..config.total_steps {
        let dropout_seed = config
            .seed
            .wrapping_mul(0x9e37_79b9)
            .wrapping_add(step as u64);
        let (loss, grads) = loss_and_grads(&params, &batch(step), &plan, Some(dropout_seed))?;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at step {step}"
            )));
        }
        let adam_cfg = AdamConfig {
            lr: config.lr_at(step),
            ..AdamConfig::default()
        };
        adam_step(params.tensors_mut(), &grads, &mut adam, &adam_cfg)?;
        metrics.step_losses.push(loss);
        since += loss;
        since_count += 1;
        let done = step + 1;
        if done % config.eval_interval == 0 || done == config.total_steps {
            record(&mut metrics, done, since / since_count as f64, &params)?;
            since = 0.0;
            since_count = 0;
        }
    }
    Ok((params, metrics))
}

pub fn train_loop(config: &TrainConfig) -> Result<(ModelParams<f32>, Metrics)> {
    train_loop_with(config, |_| {})
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dimension_heads: Metrics,
    pub single_head: Metrics,
    pub dimension_heads_nll: f64,
    pub single_head_nll: f64,
}

/// Trains the per-axis-heads model and a shared-head variant with the same
/// budget, data and seed.
pub fn ablate_single_head(config: &TrainConfig) -> Result<AblationReport> {
    if config.model.mode != Mode::Nar {
        return Err(Error::ModeMismatch("ablation needs a NAR config".into()));
    }
    let (_, dim) = train_loop(config)?;
    let mut shared = config.clone();
    shared.model = config.model.with_mode(Mode::NarSharedHead);
    let (_, single) = train_loop(&shared)?;
    Ok(AblationReport {
        dimension_heads_nll: dim.final_eval_nll().expect("at least one point"),
        single_head_nll: single.final_eval_nll().expect("at least one point"),
        dimension_heads: dim,
        single_head: single,
    })
}

/// NLL on targets that receive more than one head contribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub targets: usize,
    pub mixed_nll: f64,
    /// NLL of each axis head alone, over the overlapped targets it reaches.
    pub axis_nll: Vec<f64>,
}

impl OverlapReport {
    pub fn best_single(&self) -> f64 {
        self.axis_nll
            .iter()
            .cloned()
            .filter(|x| x.is_finite())
            .fold(f64::INFINITY, f64::min)
    }
}

pub fn overlap_nll<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[Example],
) -> Result<OverlapReport> {
    if !params.config().mode.is_nar() {
        return Err(Error::ModeMismatch(
            "overlap report needs a NAR model".into(),
        ));
    }
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let plan = SequencePlan::for_config(params.config());
    let d = params.config().shape.ndim();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in plan.targets().iter().enumerate() {
        if t.source != 0 {
            groups.entry(t.target).or_default().push(i);
        }
    }
    groups.retain(|_, v| v.len() > 1);

    let mut mixed = 0.0;
    let mut targets = 0usize;
    let mut axis_sum = vec![0.0; d];
    let mut axis_count = vec![0usize; d];
    for chunk in examples.chunks(16) {
        let lps = entry_log_probs(params, chunk, &plan)?;
        for (ex, rows) in chunk.iter().zip(lps) {
            for entries in groups.values() {
                let token = plan.target_token(&ex.grid, &plan.targets()[entries[0]]) as usize;
                let contribs: Vec<&[f64]> = entries.iter().map(|&i| rows[i].as_slice()).collect();
                let m = log_softmax(&mix_logits(&contribs)?);
                mixed -= m[token];
                targets += 1;
                for &i in entries {
                    let axis = plan.targets()[i].axis;
                    axis_sum[axis] -= rows[i][token];
                    axis_count[axis] += 1;
                }
            }
        }
    }
    if targets == 0 {
        return Err(Error::InvalidArgument(
            "grid has no overlapped targets".into(),
        ));
    }
    Ok(OverlapReport {
        targets,
        mixed_nll: mixed / targets as f64,
        axis_nll: axis_sum
            .iter()
            .zip(&axis_count)
            .map(|(&s, &c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Generator;
    use crate::grid::GridShape;

    pub(crate) fn tiny(mode: Mode, steps: usize) -> TrainConfig {
        let shape = GridShape::new(&[4, 4]).unwrap();
        TrainConfig {
            model: ModelConfig {
                vocab_size: 6,
                num_classes: 2,
                embed_dim: 16,
                num_blocks: 1,
                num_heads: 2,
                mode,
                shape: shape.clone(),
                dropout: 0.0,
            },
            data: SyntheticSpec {
                shape,
                vocab_size: 6,
                num_classes: 2,
                generator: Generator::Shapes {
                    max_rects: 2,
                    bars: false,
                },
                seed: 0,
            },
            batch_size: 4,
            total_steps: steps,
            learning_rate: 1e-3,
            warmup_steps: 2,
            eval_interval: 5,
            eval_samples: 8,
            seed: 1,
        }
    }

    #[test]
    fn zero_steps_returns_init() {
        let c = tiny(Mode::Nar, 0);
        let (p, m) = train_loop(&c).unwrap();
        assert_eq!(p, ModelParams::init(&c.model, c.seed).unwrap());
        assert_eq!(m.points.len(), 1);
        assert!(m.step_losses.is_empty());
    }

    #[test]
    fn deterministic_metrics() {
        for mode in [Mode::Nar, Mode::Raster] {
            let c = tiny(mode, 7);
            let (pa, a) = train_loop(&c).unwrap();
            let (pb, b) = train_loop(&c).unwrap();
            assert_eq!(pa, pb);
            assert_eq!(a.without_timing(), b.without_timing());
            let steps: Vec<usize> = a.points.iter().map(|p| p.step).collect();
            assert_eq!(steps, vec![0, 5, 7]);
        }
    }

    #[test]
    fn warmup_schedule() {
        let c = tiny(Mode::Nar, 0);
        assert!((c.lr_at(0) - 5e-4).abs() < 1e-12);
        assert_eq!(c.lr_at(1), 1e-3);
        assert_eq!(c.lr_at(100), 1e-3);
    }

    #[test]
    fn eval_is_batch_invariant() {
        let c = tiny(Mode::Nar, 0);
        let p = ModelParams::<f32>::init(&c.model, 4).unwrap();
        let eval = c.eval_set();
        let a = eval_nll(&p, &eval, 1).unwrap();
        let b = eval_nll(&p, &eval, 3).unwrap();
        let e = eval_nll(&p, &eval, 8).unwrap();
        assert!((a - b).abs() < 1e-6 && (a - e).abs() < 1e-6);
        assert!(eval_nll(&p, &[], 4).is_err());
    }

    #[test]
    fn uniform_model_scores_ln_vocab() {
        let mut c = tiny(Mode::Nar, 0);
        c.model.vocab_size = 4;
        c.data.vocab_size = 4;
        let mut p = ModelParams::<f64>::init(&c.model, 0).unwrap();
        p.zero_output_layers();
        let nll = eval_nll(&p, &c.eval_set(), 4).unwrap();
        assert!((nll - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut c = tiny(Mode::Nar, 1);
        assert!(c.validate().is_ok());
        c.data.vocab_size = 7;
        assert!(c.validate().is_err());
        let mut c = tiny(Mode::Nar, 1);
        c.batch_size = 0;
        assert!(c.validate().is_err());
        let text = serde_json::to_string(&tiny(Mode::Raster, 3)).unwrap();
        assert_eq!(
            serde_json::from_str::<TrainConfig>(&text).unwrap(),
            tiny(Mode::Raster, 3)
        );
    }

    #[test]
    fn overlap_report_shapes() {
        let c = tiny(Mode::Nar, 0);
        let p = ModelParams::<f32>::init(&c.model, 0).unwrap();
        let r = overlap_nll(&p, &c.eval_set()).unwrap();
        assert_eq!(r.targets, 8 * 9);
        assert_eq!(r.axis_nll.len(), 2);
    }
}
