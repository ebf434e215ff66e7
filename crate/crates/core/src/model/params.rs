use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::model::config::ModelConfig;
use crate::numerics::{Scalar, Tensor};

const INIT_STD: f64 = 0.02;

/// Indices of one transformer block's tensors in the parameter list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub ln1_gain: usize,
    pub ln1_bias: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_gain: usize,
    pub ln2_bias: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub block: BlockLayout,
    pub ln_gain: usize,
    pub ln_bias: usize,
    pub w_out: usize,
    pub b_out: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub token_embed: usize,
    pub class_embed: usize,
    pub pos_embed: Vec<usize>,
    pub blocks: Vec<BlockLayout>,
    pub heads: Vec<HeadLayout>,
    /// Name and shape of every tensor, in declaration order.
    pub entries: Vec<(String, Vec<usize>)>,
}

#[derive(Clone, Copy)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct LayoutBuilder {
    entries: Vec<(String, Vec<usize>)>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        self.entries.push((name, shape));
        self.inits.push(init);
        self.entries.len() - 1
    }

    fn block(&mut self, prefix: &str, d: usize, f: usize, residual_std: f64) -> BlockLayout {
        let mut add =
            |name: &str, shape: Vec<usize>, init| self.add(format!("{prefix}.{name}"), shape, init);
        BlockLayout {
            ln1_gain: add("ln1.gain", vec![d], Init::Ones),
            ln1_bias: add("ln1.bias", vec![d], Init::Zeros),
            wq: add("attn.wq", vec![d, d], Init::Normal(INIT_STD)),
            bq: add("attn.bq", vec![d], Init::Zeros),
            wk: add("attn.wk", vec![d, d], Init::Normal(INIT_STD)),
            bk: add("attn.bk", vec![d], Init::Zeros),
            wv: add("attn.wv", vec![d, d], Init::Normal(INIT_STD)),
            bv: add("attn.bv", vec![d], Init::Zeros),
            wo: add("attn.wo", vec![d, d], Init::Normal(residual_std)),
            bo: add("attn.bo", vec![d], Init::Zeros),
            ln2_gain: add("ln2.gain", vec![d], Init::Ones),
            ln2_bias: add("ln2.bias", vec![d], Init::Zeros),
            w1: add("mlp.w1", vec![d, f], Init::Normal(INIT_STD)),
            b1: add("mlp.b1", vec![f], Init::Zeros),
            w2: add("mlp.w2", vec![f, d], Init::Normal(residual_std)),
            b2: add("mlp.b2", vec![d], Init::Zeros),
        }
    }
}

fn build_layout(config: &ModelConfig) -> (ParamLayout, Vec<Init>) {
    let d = config.embed_dim;
    let f = config.ffn_dim();
    let depth = config.num_blocks + 1;
    let residual_std = INIT_STD / ((2 * depth) as f64).sqrt();
    let mut b = LayoutBuilder {
        entries: Vec::new(),
        inits: Vec::new(),
    };
    let token_embed = b.add(
        "embed.token".into(),
        vec![config.vocab_size, d],
        Init::Normal(INIT_STD),
    );
    let class_embed = b.add(
        "embed.class".into(),
        vec![config.num_classes + 1, d],
        Init::Normal(INIT_STD),
    );
    let pos_embed = config
        .shape
        .dims()
        .iter()
        .enumerate()
        .map(|(axis, &n)| {
            b.add(
                format!("embed.pos{axis}"),
                vec![n, d],
                Init::Normal(INIT_STD),
            )
        })
        .collect();
    let blocks = (0..config.num_blocks)
        .map(|l| b.block(&format!("backbone.{l}"), d, f, residual_std))
        .collect();
    let heads = (0..config.num_decoding_heads())
        .map(|h| {
            let block = b.block(&format!("head.{h}"), d, f, residual_std);
            HeadLayout {
                block,
                ln_gain: b.add(format!("head.{h}.ln.gain"), vec![d], Init::Ones),
                ln_bias: b.add(format!("head.{h}.ln.bias"), vec![d], Init::Zeros),
                w_out: b.add(
                    format!("head.{h}.out.weight"),
                    vec![d, config.vocab_size],
                    Init::Normal(INIT_STD),
                ),
                b_out: b.add(
                    format!("head.{h}.out.bias"),
                    vec![config.vocab_size],
                    Init::Zeros,
                ),
            }
        })
        .collect();
    let layout = ParamLayout {
        token_embed,
        class_embed,
        pos_embed,
        blocks,
        heads,
        entries: b.entries,
    };
    (layout, b.inits)
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        build_layout(config).0
    }

    pub fn num_params(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Weights of a model, stored as a flat list of tensors in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    config: ModelConfig,
    layout: ParamLayout,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ModelParams<T> {
    /// Deterministic initialization: normal(0, 0.02) for embeddings and
    /// projections, residual output projections scaled down with depth,
    /// unit layer-norm gains and zero biases.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, inits) = build_layout(config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = layout
            .entries
            .iter()
            .zip(inits)
            .map(|((_, shape), init)| {
                let n: usize = shape.iter().product();
                let data: Vec<T> = match init {
                    Init::Zeros => vec![T::zero(); n],
                    Init::Ones => vec![T::one(); n],
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0, std).expect("positive std");
                        (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect()
                    }
                };
                Tensor::new(shape, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            layout,
            tensors,
        })
    }

    /// Wraps existing tensors, checking them against the layout of `config`.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if tensors.len() != layout.entries.len() {
            return Err(crate::error::Error::InvalidConfig(format!(
                "{} tensors for a layout of {}",
                tensors.len(),
                layout.entries.len()
            )));
        }
        for (t, (name, shape)) in tensors.iter().zip(&layout.entries) {
            if t.shape() != shape.as_slice() {
                return Err(crate::error::Error::InvalidConfig(format!(
                    "{name}: shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zeroes every output projection so each head predicts uniformly.
    pub fn zero_output_layers(&mut self) {
        for h in self.layout.heads.clone() {
            self.tensors[h.w_out].fill(T::zero());
            self.tensors[h.b_out].fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}
