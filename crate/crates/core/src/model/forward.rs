//! Forward passes: full-sequence training graphs and cached incremental
//! decoding share the same block code.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{GridShape, Position, TokenGrid};
use crate::mask::{build_mask, AttentionMask};
use crate::model::config::{Mode, ModelConfig};
use crate::model::params::{BlockLayout, ModelParams, ParamLayout};
use crate::numerics::{AttentionSpec, Graph, NodeId, PastKv, Scalar, Tensor};
use crate::schedule::{build_schedule, target_table, Schedule, TargetEntry};

/// What occupies one sequence slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SlotInput {
    /// Class embedding; `class == num_classes` selects the null class.
    Condition {
        class: usize,
    },
    Token {
        token: u16,
        pos: Position,
    },
}

/// A training or evaluation example.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub grid: TokenGrid,
    pub class: usize,
}

/// Sequence layout for a mode: slot order, attention mask and supervision.
#[derive(Debug, Clone)]
pub struct SequencePlan {
    positions: Vec<Position>,
    mask: Arc<AttentionMask>,
    targets: Vec<TargetEntry>,
    schedule: Option<Schedule>,
}

impl SequencePlan {
    /// Near-to-far order with the proximity-aware mask.
    pub fn nar(shape: &GridShape) -> Self {
        let schedule = build_schedule(shape);
        Self::from_schedule(schedule)
    }

    pub fn from_schedule(schedule: Schedule) -> Self {
        Self {
            positions: schedule.order().to_vec(),
            mask: Arc::new(build_mask(&schedule)),
            targets: target_table(&schedule),
            schedule: Some(schedule),
        }
    }

    /// Row-major order with a strictly causal mask; slot `i` predicts slot
    /// `i + 1`.
    pub fn raster(shape: &GridShape) -> Self {
        let positions: Vec<Position> = shape.raster_positions().collect();
        let targets = (0..positions.len())
            .map(|i| TargetEntry {
                source: i,
                axis: 0,
                target: i + 1,
            })
            .collect();
        Self {
            mask: Arc::new(AttentionMask::causal(positions.len() + 1)),
            positions,
            targets,
            schedule: None,
        }
    }

    pub fn for_config(config: &ModelConfig) -> Self {
        if config.mode.is_nar() {
            Self::nar(&config.shape)
        } else {
            Self::raster(&config.shape)
        }
    }

    pub fn seq_len(&self) -> usize {
        self.positions.len() + 1
    }

    pub fn mask(&self) -> &Arc<AttentionMask> {
        &self.mask
    }

    pub fn targets(&self) -> &[TargetEntry] {
        &self.targets
    }

    pub fn schedule(&self) -> Option<&Schedule> {
        self.schedule.as_ref()
    }

    /// Grid position of a token slot.
    pub fn position(&self, slot: usize) -> Option<&Position> {
        slot.checked_sub(1).map(|j| &self.positions[j])
    }

    pub fn positions(&self) -> &[Position] {
        &self.positions
    }

    pub fn inputs(&self, grid: &TokenGrid, class: usize) -> Vec<SlotInput> {
        std::iter::once(SlotInput::Condition { class })
            .chain(self.positions.iter().map(|p| SlotInput::Token {
                token: grid.get(p),
                pos: p.clone(),
            }))
            .collect()
    }

    pub fn target_token(&self, grid: &TokenGrid, entry: &TargetEntry) -> u16 {
        grid.get(
            self.position(entry.target)
                .expect("targets are token slots"),
        )
    }
}

#[derive(Clone, Copy)]
struct Arch<'p> {
    config: &'p ModelConfig,
    layout: &'p ParamLayout,
}

impl<'p> Arch<'p> {
    fn of<T: Scalar>(params: &'p ModelParams<T>) -> Self {
        Self {
            config: params.config(),
            layout: params.layout(),
        }
    }
}

struct Dropout {
    rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    fn apply<T: Scalar>(&mut self, g: &mut Graph<'_, T>, x: NodeId) -> Result<NodeId> {
        let keep = T::from_f64(1.0 / (1.0 - self.rate));
        let n = g.value(x).len();
        let factors = (0..n)
            .map(|_| {
                if self.rng.random::<f64>() < self.rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect();
        g.mul_const(x, factors)
    }
}

fn maybe_dropout<T: Scalar>(
    g: &mut Graph<'_, T>,
    x: NodeId,
    dropout: &mut Option<Dropout>,
) -> Result<NodeId> {
    match dropout {
        Some(d) if d.rate > 0.0 => d.apply(g, x),
        _ => Ok(x),
    }
}

fn register<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ModelParams<T>,
    trainable: bool,
) -> Vec<NodeId> {
    params
        .tensors()
        .iter()
        .map(|t| {
            if trainable {
                g.param(t)
            } else {
                g.constant_ref(t)
            }
        })
        .collect()
}

fn embed_inputs<T: Scalar>(
    g: &mut Graph<'_, T>,
    arch: Arch<'_>,
    ids: &[NodeId],
    inputs: &[SlotInput],
) -> Result<NodeId> {
    let config = arch.config;
    let layout = arch.layout;
    let ndim = config.shape.ndim();
    let mut tok = Vec::with_capacity(inputs.len());
    let mut cls = Vec::with_capacity(inputs.len());
    let mut pos: Vec<Vec<Option<usize>>> = vec![Vec::with_capacity(inputs.len()); ndim];
    for input in inputs {
        match input {
            SlotInput::Condition { class } => {
                if *class > config.num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "class {class} outside [0, {}]",
                        config.num_classes
                    )));
                }
                tok.push(None);
                cls.push(Some(*class));
                pos.iter_mut().for_each(|p| p.push(None));
            }
            SlotInput::Token { token, pos: p } => {
                if *token as usize >= config.vocab_size {
                    return Err(Error::TargetOutOfRange {
                        target: *token as usize,
                        vocab: config.vocab_size,
                    });
                }
                if !config.shape.contains(p.coords()) {
                    return Err(Error::OutOfBounds(p.0.clone()));
                }
                tok.push(Some(*token as usize));
                cls.push(None);
                for (axis, column) in pos.iter_mut().enumerate() {
                    column.push(Some(p.coords()[axis]));
                }
            }
        }
    }
    let mut x = g.embed(ids[layout.token_embed], tok)?;
    let c = g.embed(ids[layout.class_embed], cls)?;
    x = g.add(x, c)?;
    for (axis, column) in pos.into_iter().enumerate() {
        let p = g.embed(ids[layout.pos_embed[axis]], column)?;
        x = g.add(x, p)?;
    }
    Ok(x)
}

fn layer_norm<T: Scalar>(
    g: &mut Graph<'_, T>,
    ids: &[NodeId],
    x: NodeId,
    gain: usize,
    bias: usize,
) -> Result<NodeId> {
    g.layer_norm(x, ids[gain], ids[bias])
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))`. Returns the
/// output along with the freshly projected keys and values.
fn block_forward<T: Scalar>(
    g: &mut Graph<'_, T>,
    ids: &[NodeId],
    b: &BlockLayout,
    x: NodeId,
    spec: AttentionSpec<T>,
    dropout: &mut Option<Dropout>,
) -> Result<(NodeId, NodeId, NodeId)> {
    let h = layer_norm(g, ids, x, b.ln1_gain, b.ln1_bias)?;
    let q = g.linear(h, ids[b.wq], ids[b.bq])?;
    let k = g.linear(h, ids[b.wk], ids[b.bk])?;
    let v = g.linear(h, ids[b.wv], ids[b.bv])?;
    let a = g.attention(q, k, v, spec)?;
    let o = g.linear(a, ids[b.wo], ids[b.bo])?;
    let o = maybe_dropout(g, o, dropout)?;
    let x = g.add(x, o)?;
    let h = layer_norm(g, ids, x, b.ln2_gain, b.ln2_bias)?;
    let f = g.linear(h, ids[b.w1], ids[b.b1])?;
    let f = g.gelu(f);
    let f = g.linear(f, ids[b.w2], ids[b.b2])?;
    let f = maybe_dropout(g, f, dropout)?;
    Ok((g.add(x, f)?, k, v))
}

struct Trunk {
    /// Normalized hidden states per decoding head.
    heads: Vec<NodeId>,
    /// New keys and values per block (backbone first, then heads).
    kv: Vec<(NodeId, NodeId)>,
}

#[allow(clippy::too_many_arguments)]
fn trunk<T: Scalar>(
    g: &mut Graph<'_, T>,
    arch: Arch<'_>,
    ids: &[NodeId],
    x: NodeId,
    mask: Arc<AttentionMask>,
    batch: usize,
    cache: Option<&KvCache<T>>,
    mut dropout: Option<Dropout>,
) -> Result<Trunk> {
    let layout = arch.layout;
    let heads = arch.config.num_heads;
    let spec = |i: usize| AttentionSpec {
        batch,
        heads,
        mask: mask.clone(),
        past: cache.map(|c| c.blocks[i].clone()),
    };
    let mut kv = Vec::new();
    let mut x = x;
    for (l, b) in layout.blocks.iter().enumerate() {
        let (y, k, v) = block_forward(g, ids, b, x, spec(l), &mut dropout)?;
        x = y;
        kv.push((k, v));
    }
    let mut states = Vec::with_capacity(layout.heads.len());
    for (h, head) in layout.heads.iter().enumerate() {
        let (y, k, v) = block_forward(
            g,
            ids,
            &head.block,
            x,
            spec(layout.blocks.len() + h),
            &mut dropout,
        )?;
        kv.push((k, v));
        states.push(layer_norm(g, ids, y, head.ln_gain, head.ln_bias)?);
    }
    Ok(Trunk { heads: states, kv })
}

fn head_logits<T: Scalar>(
    g: &mut Graph<'_, T>,
    arch: Arch<'_>,
    ids: &[NodeId],
    head: usize,
    states: NodeId,
) -> Result<NodeId> {
    let h = &arch.layout.heads[head];
    g.linear(states, ids[h.w_out], ids[h.b_out])
}

fn check_examples(config: &ModelConfig, examples: &[Example]) -> Result<()> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for ex in examples {
        if ex.grid.shape() != &config.shape {
            return Err(Error::ShapeMismatch(format!(
                "grid {} for model shape {}",
                ex.grid.shape(),
                config.shape
            )));
        }
        if ex.class >= config.num_classes {
            return Err(Error::InvalidArgument(format!(
                "class {} for {} classes",
                ex.class, config.num_classes
            )));
        }
    }
    Ok(())
}

/// Nodes of a training graph.
pub struct LossGraph {
    pub loss: NodeId,
    pub params: Vec<NodeId>,
    /// Logits per decoding head, one row per routed target entry.
    pub head_logits: Vec<NodeId>,
    /// `(example index, entry)` for each logits row, per head.
    pub head_entries: Vec<Vec<(usize, TargetEntry)>>,
}

/// Builds the uniform-weight cross-entropy over every target entry of every
/// example. Entries are routed to the head owning their axis.
pub fn build_loss<'a, T: Scalar>(
    g: &mut Graph<'a, T>,
    params: &'a ModelParams<T>,
    examples: &[Example],
    plan: &SequencePlan,
    dropout_seed: Option<u64>,
) -> Result<LossGraph> {
    let ids = register(g, params, true);
    build_loss_on(g, params.config(), ids, examples, plan, dropout_seed)
}

/// [`build_loss`] over parameter leaves already in the graph, one per layout
/// entry in declaration order.
pub fn build_loss_on<T: Scalar>(
    g: &mut Graph<'_, T>,
    config: &ModelConfig,
    ids: Vec<NodeId>,
    examples: &[Example],
    plan: &SequencePlan,
    dropout_seed: Option<u64>,
) -> Result<LossGraph> {
    let layout = ParamLayout::new(config);
    if ids.len() != layout.entries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameter nodes for a layout of {}",
            ids.len(),
            layout.entries.len()
        )));
    }
    let arch = Arch {
        config,
        layout: &layout,
    };
    check_examples(config, examples)?;
    if plan.seq_len() != config.shape.num_tokens() + 1 {
        return Err(Error::ShapeMismatch(
            "plan does not match model shape".into(),
        ));
    }
    let inputs: Vec<SlotInput> = examples
        .iter()
        .flat_map(|ex| plan.inputs(&ex.grid, ex.class))
        .collect();
    let x = embed_inputs(g, arch, &ids, &inputs)?;
    let dropout = dropout_seed
        .filter(|_| config.dropout > 0.0)
        .map(|seed| Dropout {
            rate: config.dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
        });
    let trunk = trunk(
        g,
        arch,
        &ids,
        x,
        plan.mask().clone(),
        examples.len(),
        None,
        dropout,
    )?;

    let seq = plan.seq_len();
    let num_heads = config.num_decoding_heads();
    let mut head_entries: Vec<Vec<(usize, TargetEntry)>> = vec![Vec::new(); num_heads];
    for (e, _) in examples.iter().enumerate() {
        for entry in plan.targets() {
            head_entries[config.head_for_axis(entry.axis)].push((e, *entry));
        }
    }
    let mut logit_nodes = Vec::with_capacity(num_heads);
    let mut targets = Vec::new();
    for (h, entries) in head_entries.iter().enumerate() {
        let rows = entries.iter().map(|(e, t)| e * seq + t.source).collect();
        let states = g.select_rows(trunk.heads[h], rows)?;
        logit_nodes.push(head_logits(g, arch, &ids, h, states)?);
        targets.extend(
            entries
                .iter()
                .map(|(e, t)| plan.target_token(&examples[*e].grid, t) as usize),
        );
    }
    let all = g.concat_rows(logit_nodes.clone())?;
    let weights = vec![T::one(); targets.len()];
    let loss = g.cross_entropy(all, targets, weights)?;
    Ok(LossGraph {
        loss,
        params: ids,
        head_logits: logit_nodes,
        head_entries,
    })
}

/// Mean loss over a batch together with its gradient for every parameter.
pub fn loss_and_grads<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[Example],
    plan: &SequencePlan,
    dropout_seed: Option<u64>,
) -> Result<(f64, Vec<Tensor<T>>)> {
    let mut g = Graph::new();
    let lg = build_loss(&mut g, params, examples, plan, dropout_seed)?;
    let loss = g.value(lg.loss).item().as_f64();
    let mut grads = g.backward(lg.loss)?;
    let grads = lg
        .params
        .iter()
        .zip(params.tensors())
        .map(|(&id, t)| grads.take(id).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((loss, grads))
}

/// Loss and per-head logits for one example.
#[derive(Debug, Clone)]
pub struct TrainOutput<T> {
    pub loss: f64,
    pub head_logits: Vec<Tensor<T>>,
    pub head_entries: Vec<Vec<TargetEntry>>,
}

fn single_forward<T: Scalar>(
    params: &ModelParams<T>,
    grid: &TokenGrid,
    class: usize,
    plan: &SequencePlan,
) -> Result<TrainOutput<T>> {
    let example = [Example {
        grid: grid.clone(),
        class,
    }];
    let mut g = Graph::new();
    let lg = build_loss(&mut g, params, &example, plan, None)?;
    Ok(TrainOutput {
        loss: g.value(lg.loss).item().as_f64(),
        head_logits: lg.head_logits.iter().map(|&n| g.value(n).clone()).collect(),
        head_entries: lg
            .head_entries
            .into_iter()
            .map(|es| es.into_iter().map(|(_, t)| t).collect())
            .collect(),
    })
}

/// Teacher-forced NAR loss for one grid under the proximity mask.
pub fn forward_train<T: Scalar>(
    params: &ModelParams<T>,
    grid: &TokenGrid,
    class: usize,
    plan: &SequencePlan,
) -> Result<TrainOutput<T>> {
    if !params.config().mode.is_nar() {
        return Err(Error::ModeMismatch(
            "forward_train needs a NAR model".into(),
        ));
    }
    if plan.schedule().is_none() {
        return Err(Error::ModeMismatch("forward_train needs a NAR plan".into()));
    }
    single_forward(params, grid, class, plan)
}

/// Causal next-token loss over the raster sequence.
pub fn raster_forward_train<T: Scalar>(
    params: &ModelParams<T>,
    grid: &TokenGrid,
    class: usize,
) -> Result<f64> {
    if params.config().mode != Mode::Raster {
        return Err(Error::ModeMismatch(
            "raster_forward_train needs a raster model".into(),
        ));
    }
    let plan = SequencePlan::raster(&params.config().shape);
    Ok(single_forward(params, grid, class, &plan)?.loss)
}

/// Logits of every decoding head at every slot of `inputs` (batch-major,
/// `batch` sequences of `mask.rows()` slots) with no cache.
pub fn forward_logits<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &[SlotInput],
    mask: &AttentionMask,
    batch: usize,
) -> Result<Vec<Tensor<T>>> {
    if batch == 0 || inputs.len() != batch * mask.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs for {batch} sequences of {}",
            inputs.len(),
            mask.rows()
        )));
    }
    let mut g = Graph::new();
    let ids = register(&mut g, params, false);
    let x = embed_inputs(&mut g, Arch::of(params), &ids, inputs)?;
    let trunk = trunk(
        &mut g,
        Arch::of(params),
        &ids,
        x,
        Arc::new(mask.clone()),
        batch,
        None,
        None,
    )?;
    let mut out = Vec::with_capacity(trunk.heads.len());
    for (h, &states) in trunk.heads.iter().enumerate() {
        let l = head_logits(&mut g, Arch::of(params), &ids, h, states)?;
        out.push(g.value(l).clone());
    }
    Ok(out)
}

/// Per-block keys and values for `batch` independent sequences.
#[derive(Debug, Clone)]
pub struct KvCache<T> {
    batch: usize,
    rows: usize,
    blocks: Vec<Arc<PastKv<T>>>,
}

impl<T: Scalar> KvCache<T> {
    pub fn new(config: &ModelConfig, batch: usize) -> Self {
        let n = config.num_blocks + config.num_decoding_heads();
        let empty = Arc::new(PastKv {
            rows: 0,
            keys: Vec::new(),
            values: Vec::new(),
        });
        Self {
            batch,
            rows: 0,
            blocks: vec![empty; n],
        }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// Number of processed slots per sequence.
    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Cached floats across all blocks.
    pub fn len_values(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.keys.len() + b.values.len())
            .sum()
    }

    fn append(&mut self, new_rows: usize, dim: usize, kv: &[(Tensor<T>, Tensor<T>)]) {
        let old = self.rows;
        let total = old + new_rows;
        for (block, (k, v)) in self.blocks.iter_mut().zip(kv) {
            let mut keys = Vec::with_capacity(self.batch * total * dim);
            let mut values = Vec::with_capacity(self.batch * total * dim);
            for b in 0..self.batch {
                keys.extend_from_slice(&block.keys[b * old * dim..(b + 1) * old * dim]);
                keys.extend_from_slice(&k.data()[b * new_rows * dim..(b + 1) * new_rows * dim]);
                values.extend_from_slice(&block.values[b * old * dim..(b + 1) * old * dim]);
                values.extend_from_slice(&v.data()[b * new_rows * dim..(b + 1) * new_rows * dim]);
            }
            *block = Arc::new(PastKv {
                rows: total,
                keys,
                values,
            });
        }
        self.rows = total;
    }
}

/// Feeds new slots (batch-major, the same count per sequence) on top of the
/// cache. `mask` has one row per new slot and one column per processed slot
/// including the new ones. Returns logits per decoding head for the new
/// slots and extends the cache.
pub fn forward_incremental<T: Scalar>(
    params: &ModelParams<T>,
    inputs: &[SlotInput],
    mask: &AttentionMask,
    cache: &mut KvCache<T>,
) -> Result<Vec<Tensor<T>>> {
    if inputs.is_empty() {
        return Err(Error::InvalidArgument("no new slots".into()));
    }
    let batch = cache.batch;
    if !inputs.len().is_multiple_of(batch) {
        return Err(Error::ShapeMismatch(format!(
            "{} inputs for batch {batch}",
            inputs.len()
        )));
    }
    let new_rows = inputs.len() / batch;
    if mask.rows() != new_rows || mask.cols() != cache.rows + new_rows {
        return Err(Error::CacheDesync(format!(
            "mask {}x{} for {new_rows} new slots over {} cached",
            mask.rows(),
            mask.cols(),
            cache.rows
        )));
    }
    let mut g = Graph::new();
    let ids = register(&mut g, params, false);
    let x = embed_inputs(&mut g, Arch::of(params), &ids, inputs)?;
    let trunk = trunk(
        &mut g,
        Arch::of(params),
        &ids,
        x,
        Arc::new(mask.clone()),
        batch,
        Some(cache),
        None,
    )?;
    let mut out = Vec::with_capacity(trunk.heads.len());
    for (h, &states) in trunk.heads.iter().enumerate() {
        let l = head_logits(&mut g, Arch::of(params), &ids, h, states)?;
        out.push(g.value(l).clone());
    }
    let kv: Vec<(Tensor<T>, Tensor<T>)> = trunk
        .kv
        .iter()
        .map(|&(k, v)| (g.value(k).clone(), g.value(v).clone()))
        .collect();
    cache.append(new_rows, params.config().embed_dim, &kv);
    Ok(out)
}

/// Log-softmax of the logits for each target entry of one example, computed
/// in 64-bit. Entries follow `plan.targets()` order.
pub fn entry_log_probs<T: Scalar>(
    params: &ModelParams<T>,
    examples: &[Example],
    plan: &SequencePlan,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let config = params.config();
    check_examples(config, examples)?;
    let inputs: Vec<SlotInput> = examples
        .iter()
        .flat_map(|ex| plan.inputs(&ex.grid, ex.class))
        .collect();
    let logits = forward_logits(params, &inputs, plan.mask(), examples.len())?;
    let seq = plan.seq_len();
    Ok((0..examples.len())
        .map(|e| {
            plan.targets()
                .iter()
                .map(|t| {
                    let row = logits[config.head_for_axis(t.axis)].row(e * seq + t.source);
                    log_softmax(row)
                })
                .collect()
        })
        .collect())
}

pub fn log_softmax<T: Scalar>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|x| x.as_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max
        + row
            .iter()
            .map(|x| (x.as_f64() - max).exp())
            .sum::<f64>()
            .ln();
    row.iter().map(|x| x.as_f64() - lse).collect()
}
