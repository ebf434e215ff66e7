//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Every operation appends a node holding its output; [`Graph::backward`]
//! walks the tape in reverse. Parameters enter as borrowed leaves so building
//! a graph never copies weights.

use std::borrow::Cow;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::mask::AttentionMask;
use crate::numerics::tensor::{matmul, Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Keys and values of earlier sequence slots, laid out `[batch][row][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PastKv<T> {
    pub rows: usize,
    pub keys: Vec<T>,
    pub values: Vec<T>,
}

/// Configuration of one masked multi-head attention call.
///
/// Queries cover `mask.rows()` slots per batch element and keys cover
/// `mask.cols()` slots: the past rows (if any) followed by the new rows.
#[derive(Debug, Clone)]
pub struct AttentionSpec<T> {
    pub batch: usize,
    pub heads: usize,
    pub mask: Arc<AttentionMask>,
    pub past: Option<Arc<PastKv<T>>>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Embed {
        table: NodeId,
        index: Vec<Option<usize>>,
    },
    SelectRows {
        x: NodeId,
        index: Vec<usize>,
    },
    ConcatRows(Vec<NodeId>),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        normed: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: NodeId,
        tanh: Vec<T>,
    },
    MulConst {
        x: NodeId,
        factors: Vec<T>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec<T>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<T>,
        probs: Vec<T>,
        weight_sum: T,
    },
}

struct Node<'a, T: Scalar> {
    op: Op<T>,
    value: Cow<'a, Tensor<T>>,
    needs_grad: bool,
}

pub struct Graph<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

impl<T: Scalar> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }
}

const GELU_A: f64 = 0.044715;

/// `tanh(sqrt(2/pi) * (x + a x^3))`, the inner term of tanh-approximated GELU.
fn gelu_tanh<T: Scalar>(x: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let u = c * (x + T::from_f64(GELU_A) * x * x * x);
    let two = T::from_f64(2.0);
    // Through exp rather than tanh: the libm tanh is several times slower.
    T::one() - two / ((two * u).exp() + T::one())
}

fn gelu_grad<T: Scalar>(x: T, t: T) -> T {
    let c = T::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let half = T::from_f64(0.5);
    let a3 = T::from_f64(3.0 * GELU_A);
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + a3 * x * x)
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> NodeId {
        value.debug_check_finite("graph node");
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            needs_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn grad_any(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].needs_grad)
    }

    /// Trainable leaf borrowed from a parameter store.
    pub fn param(&mut self, t: &'a Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Borrowed(t),
            needs_grad: true,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, t, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> NodeId {
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Cow::Borrowed(t),
            needs_grad: false,
        });
        NodeId(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::ShapeMismatch(format!(
                "add {:?} + {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        let mut out = va.clone();
        out.add_assign(vb);
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(Op::Add(a, b), out, ng))
    }

    /// Adds a bias vector to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.len() != vx.cols() {
            return Err(Error::ShapeMismatch(format!(
                "bias of {} for {} columns",
                vb.len(),
                vx.cols()
            )));
        }
        let mut out = vx.clone();
        let c = vx.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(vb.data()) {
                *o += b;
            }
        }
        let ng = self.grad_any(&[x, bias]);
        Ok(self.push(Op::AddBias(x, bias), out, ng))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = matmul(self.value(a), self.value(b))?;
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(Op::MatMul(a, b), out, ng))
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    /// Rows of `table` selected by `index`; `None` yields a zero row.
    pub fn embed(&mut self, table: NodeId, index: Vec<Option<usize>>) -> Result<NodeId> {
        let t = self.value(table);
        let (n, c) = (t.rows(), t.cols());
        let mut out = Tensor::zeros(&[index.len(), c]);
        for (r, idx) in index.iter().enumerate() {
            if let Some(i) = *idx {
                if i >= n {
                    return Err(Error::InvalidArgument(format!(
                        "embedding index {i} for table of {n} rows"
                    )));
                }
                out.data_mut()[r * c..(r + 1) * c].copy_from_slice(t.row(i));
            }
        }
        let ng = self.grad_any(&[table]);
        Ok(self.push(Op::Embed { table, index }, out, ng))
    }

    pub fn select_rows(&mut self, x: NodeId, index: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x);
        let c = t.cols();
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in &index {
            if i >= t.rows() {
                return Err(Error::InvalidArgument(format!("row {i} of {}", t.rows())));
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(&[index.len(), c], data)?;
        let ng = self.grad_any(&[x]);
        Ok(self.push(Op::SelectRows { x, index }, out, ng))
    }

    pub fn concat_rows(&mut self, parts: Vec<NodeId>) -> Result<NodeId> {
        let c = parts
            .first()
            .map(|&p| self.value(p).cols())
            .ok_or_else(|| Error::InvalidArgument("concat of nothing".into()))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in &parts {
            let v = self.value(p);
            if v.cols() != c {
                return Err(Error::ShapeMismatch(format!(
                    "concat {} vs {} columns",
                    v.cols(),
                    c
                )));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(&[rows, c], data)?;
        let ng = self.grad_any(&parts);
        Ok(self.push(Op::ConcatRows(parts), out, ng))
    }

    /// Row-wise layer normalization followed by a per-column affine map.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let vx = self.value(x);
        let c = vx.cols();
        if self.value(gain).len() != c || self.value(bias).len() != c {
            return Err(Error::ShapeMismatch("layer norm affine size".into()));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let eps = T::from_f64(LAYER_NORM_EPS);
        let inv_c = T::from_f64(1.0 / c as f64);
        let mut normed = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(vx.rows());
        let mut out = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(c) {
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let n = (v - mean) * r;
                normed.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let ng = self.grad_any(&[x, gain, bias]);
        Ok(self.push(
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            },
            out,
            ng,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let tanh: Vec<T> = vx.data().iter().map(|&v| gelu_tanh(v)).collect();
        let half = T::from_f64(0.5);
        let data = vx
            .data()
            .iter()
            .zip(&tanh)
            .map(|(&v, &t)| half * v * (T::one() + t))
            .collect();
        let out = Tensor::new(vx.shape(), data).expect("same shape");
        let ng = self.grad_any(&[x]);
        let tanh = if ng { tanh } else { Vec::new() };
        self.push(Op::Gelu { x, tanh }, out, ng)
    }

    /// Elementwise product with constant factors (dropout masks).
    pub fn mul_const(&mut self, x: NodeId, factors: Vec<T>) -> Result<NodeId> {
        let vx = self.value(x);
        if factors.len() != vx.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} factors for {} values",
                factors.len(),
                vx.len()
            )));
        }
        let data = vx
            .data()
            .iter()
            .zip(&factors)
            .map(|(&a, &b)| a * b)
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        let ng = self.grad_any(&[x]);
        Ok(self.push(Op::MulConst { x, factors }, out, ng))
    }

    /// Masked scaled-dot-product attention over `heads` column groups.
    ///
    /// Disallowed keys receive an effective additive bias of `-inf`; their
    /// softmax weight is exactly zero, so they cannot influence the output.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec<T>,
    ) -> Result<NodeId> {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let AttentionSpec {
            batch,
            heads,
            ref mask,
            ref past,
        } = spec;
        if heads == 0 || d % heads != 0 {
            return Err(Error::ShapeMismatch(format!("{d} dims over {heads} heads")));
        }
        if batch == 0 || vq.rows() % batch != 0 || vk.rows() % batch != 0 {
            return Err(Error::ShapeMismatch("rows not divisible by batch".into()));
        }
        if vk.shape() != vv.shape() || vk.cols() != d {
            return Err(Error::ShapeMismatch(format!(
                "q {:?}, k {:?}, v {:?}",
                vq.shape(),
                vk.shape(),
                vv.shape()
            )));
        }
        let sq = vq.rows() / batch;
        let sn = vk.rows() / batch;
        let sp = past.as_ref().map_or(0, |p| p.rows);
        let sk = sp + sn;
        if mask.rows() != sq || mask.cols() != sk {
            return Err(Error::ShapeMismatch(format!(
                "mask {}x{} for {sq} queries and {sk} keys",
                mask.rows(),
                mask.cols()
            )));
        }
        if let Some(p) = past {
            if p.keys.len() != batch * sp * d || p.values.len() != batch * sp * d {
                return Err(Error::CacheDesync("past key/value size".into()));
            }
        }
        if let Some(q_row) = (0..sq).find(|&i| !mask.row(i).iter().any(|&a| a)) {
            return Err(Error::EmptyMaskRow(q_row));
        }

        let hd = d / heads;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let (keys, values) = joined_kv(vk.data(), vv.data(), past.as_deref(), batch, d);
        let qd = vq.data();
        let mut probs = vec![T::zero(); batch * heads * sq * sk];
        let mut out = vec![T::zero(); batch * sq * d];
        for b in 0..batch {
            for h in 0..heads {
                let qh = &qd[b * sq * d + h * hd..];
                let kh = &keys[b * sk * d + h * hd..];
                let vh = &values[b * sk * d + h * hd..];
                let p = &mut probs[(b * heads + h) * sq * sk..][..sq * sk];
                T::gemm_ex(sq, hd, sk, scale, qh, (d, 1), kh, (1, d), T::zero(), p, sk);
                for (i, prow) in p.chunks_exact_mut(sk).enumerate() {
                    masked_softmax(prow, mask.row(i));
                }
                let oh = &mut out[b * sq * d + h * hd..];
                T::gemm_ex(
                    sq,
                    sk,
                    hd,
                    T::one(),
                    p,
                    (sk, 1),
                    vh,
                    (d, 1),
                    T::zero(),
                    oh,
                    d,
                );
            }
        }
        let out = Tensor::new(&[batch * sq, d], out)?;
        let ng = self.grad_any(&[q, k, v]);
        Ok(self.push(
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            },
            out,
            ng,
        ))
    }

    /// Weighted mean of `-log softmax(logits)[target]` over rows.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<T>,
    ) -> Result<NodeId> {
        let vl = self.value(logits);
        let vocab = vl.cols();
        if targets.len() != vl.rows() || weights.len() != vl.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows, {} targets, {} weights",
                vl.rows(),
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= vocab) {
            return Err(Error::TargetOutOfRange { target: t, vocab });
        }
        let weight_sum = weights.iter().copied().sum::<T>();
        if weight_sum <= T::zero() {
            return Err(Error::InvalidArgument("weights sum to zero".into()));
        }
        let mut probs = Vec::with_capacity(vl.len());
        let mut total = T::zero();
        for ((row, &t), &w) in vl.data().chunks(vocab).zip(&targets).zip(&weights) {
            let lse = log_sum_exp(row);
            total += w * (lse - row[t]);
            probs.extend(row.iter().map(|&x| (x - lse).exp()));
        }
        let out = Tensor::scalar(total / weight_sum);
        let ng = self.grad_any(&[logits]);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                weight_sum,
            },
            out,
            ng,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: NodeId) -> Result<Gradients<T>> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "backward from non-scalar {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn grad_slot<'g>(
        &self,
        grads: &'g mut [Option<Tensor<T>>],
        id: NodeId,
    ) -> Option<&'g mut Tensor<T>> {
        if !self.nodes[id.0].needs_grad {
            return None;
        }
        Some(grads[id.0].get_or_insert_with(|| Tensor::zeros(self.value(id).shape())))
    }

    fn backward_node(&self, node: &Node<'a, T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(ga) = self.grad_slot(grads, id) {
                        ga.add_assign(g);
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    gx.add_assign(g);
                }
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for row in g.data().chunks(g.cols()) {
                        for (o, &v) in gb.data_mut().iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.rows(), va.cols(), vb.cols());
                if let Some(ga) = self.grad_slot(grads, *a) {
                    // dA = G @ B^T
                    T::gemm(
                        m,
                        n,
                        k,
                        g.data(),
                        (n, 1),
                        vb.data(),
                        (1, n),
                        T::one(),
                        ga.data_mut(),
                    );
                }
                if let Some(gb) = self.grad_slot(grads, *b) {
                    // dB = A^T @ G
                    T::gemm(
                        k,
                        m,
                        n,
                        va.data(),
                        (1, k),
                        g.data(),
                        (n, 1),
                        T::one(),
                        gb.data_mut(),
                    );
                }
            }
            Op::Embed { table, index } => {
                if let Some(gt) = self.grad_slot(grads, *table) {
                    let c = gt.cols();
                    for (r, idx) in index.iter().enumerate() {
                        if let Some(i) = *idx {
                            axpy(T::one(), g.row(r), &mut gt.data_mut()[i * c..(i + 1) * c]);
                        }
                    }
                }
            }
            Op::SelectRows { x, index } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let c = gx.cols();
                    for (r, &i) in index.iter().enumerate() {
                        axpy(T::one(), g.row(r), &mut gx.data_mut()[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.grad_slot(grads, p) {
                        axpy(T::one(), &g.data()[offset..offset + n], gp.data_mut());
                    }
                    offset += n;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                rstd,
            } => {
                let c = g.cols();
                if let Some(gb) = self.grad_slot(grads, *bias) {
                    for row in g.data().chunks(c) {
                        axpy(T::one(), row, gb.data_mut());
                    }
                }
                if let Some(gg) = self.grad_slot(grads, *gain) {
                    for (row, nrow) in g.data().chunks(c).zip(normed.chunks(c)) {
                        for ((o, &gv), &nv) in gg.data_mut().iter_mut().zip(row).zip(nrow) {
                            *o += gv * nv;
                        }
                    }
                }
                let gain_v = self.value(*gain).data();
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let inv_c = T::from_f64(1.0 / c as f64);
                    for (r, ((row, nrow), gxrow)) in g
                        .data()
                        .chunks(c)
                        .zip(normed.chunks(c))
                        .zip(gx.data_mut().chunks_mut(c))
                        .enumerate()
                    {
                        let mut mean_gn = T::zero();
                        let mut mean_gnx = T::zero();
                        for j in 0..c {
                            let gn = row[j] * gain_v[j];
                            mean_gn += gn;
                            mean_gnx += gn * nrow[j];
                        }
                        mean_gn *= inv_c;
                        mean_gnx *= inv_c;
                        for j in 0..c {
                            let gn = row[j] * gain_v[j];
                            gxrow[j] += rstd[r] * (gn - mean_gn - nrow[j] * mean_gnx);
                        }
                    }
                }
            }
            Op::Gelu { x, tanh } => {
                let vx = self.value(*x);
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let it = gx
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(vx.data())
                        .zip(tanh);
                    for (((o, &gv), &xv), &t) in it {
                        *o += gv * gelu_grad(xv, t);
                    }
                }
            }
            Op::MulConst { x, factors } => {
                if let Some(gx) = self.grad_slot(grads, *x) {
                    for ((o, &gv), &f) in gx.data_mut().iter_mut().zip(g.data()).zip(factors) {
                        *o += gv * f;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                spec,
                probs,
            } => self.attention_backward(*q, *k, *v, spec, probs, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                weight_sum,
            } => {
                if let Some(gl) = self.grad_slot(grads, *logits) {
                    let vocab = gl.cols();
                    let upstream = g.item() / *weight_sum;
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        let scale = upstream * w;
                        let row = &mut gl.data_mut()[r * vocab..(r + 1) * vocab];
                        for (o, &p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *o += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: &AttentionSpec<T>,
        probs: &[T],
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols();
        let (batch, heads) = (spec.batch, spec.heads);
        let hd = d / heads;
        let sq = vq.rows() / batch;
        let sn = vk.rows() / batch;
        let sp = spec.past.as_ref().map_or(0, |p| p.rows);
        let sk = sp + sn;
        let scale = T::from_f64(1.0 / (hd as f64).sqrt());
        let (keys, values) = joined_kv(vk.data(), vv.data(), spec.past.as_deref(), batch, d);
        let (qd, gd) = (vq.data(), g.data());

        let mut gq = vec![T::zero(); vq.len()];
        let mut gk = vec![T::zero(); vk.len()];
        let mut gv = vec![T::zero(); vv.len()];
        let mut ds = vec![T::zero(); sq * sk];
        for b in 0..batch {
            for h in 0..heads {
                let qh = &qd[b * sq * d + h * hd..];
                let goh = &gd[b * sq * d + h * hd..];
                let kh = &keys[b * sk * d + h * hd..];
                let vh = &values[b * sk * d + h * hd..];
                let p = &probs[(b * heads + h) * sq * sk..][..sq * sk];
                // dP = dO V^T, then dS = P * (dP - rowsum(P * dP)) * scale.
                T::gemm_ex(
                    sq,
                    hd,
                    sk,
                    T::one(),
                    goh,
                    (d, 1),
                    vh,
                    (1, d),
                    T::zero(),
                    &mut ds,
                    sk,
                );
                for (drow, prow) in ds.chunks_exact_mut(sk).zip(p.chunks_exact(sk)) {
                    let weighted = dot(drow, prow);
                    for (x, &pj) in drow.iter_mut().zip(prow) {
                        *x = pj * (*x - weighted) * scale;
                    }
                }
                let gqh = &mut gq[b * sq * d + h * hd..];
                T::gemm_ex(
                    sq,
                    sk,
                    hd,
                    T::one(),
                    &ds,
                    (sk, 1),
                    kh,
                    (d, 1),
                    T::one(),
                    gqh,
                    d,
                );
                if sn > 0 {
                    let gkh = &mut gk[b * sn * d + h * hd..];
                    T::gemm_ex(
                        sn,
                        sq,
                        hd,
                        T::one(),
                        &ds[sp..],
                        (1, sk),
                        qh,
                        (d, 1),
                        T::one(),
                        gkh,
                        d,
                    );
                    let gvh = &mut gv[b * sn * d + h * hd..];
                    T::gemm_ex(
                        sn,
                        sq,
                        hd,
                        T::one(),
                        &p[sp..],
                        (1, sk),
                        goh,
                        (d, 1),
                        T::one(),
                        gvh,
                        d,
                    );
                }
            }
        }
        for (id, buf) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.grad_slot(grads, id) {
                axpy(T::one(), &buf, slot.data_mut());
            }
        }
    }
}

/// Keys and values laid out `[batch][past rows + new rows][dim]`.
fn joined_kv<'v, T: Scalar>(
    keys: &'v [T],
    values: &'v [T],
    past: Option<&PastKv<T>>,
    batch: usize,
    d: usize,
) -> (Cow<'v, [T]>, Cow<'v, [T]>) {
    match past {
        Some(p) if p.rows > 0 => {
            let sn = keys.len() / (batch * d);
            let join = |old: &[T], new: &[T]| {
                let mut out = Vec::with_capacity(old.len() + new.len());
                for b in 0..batch {
                    out.extend_from_slice(&old[b * p.rows * d..(b + 1) * p.rows * d]);
                    out.extend_from_slice(&new[b * sn * d..(b + 1) * sn * d]);
                }
                Cow::Owned(out)
            };
            (join(&p.keys, keys), join(&p.values, values))
        }
        _ => (Cow::Borrowed(keys), Cow::Borrowed(values)),
    }
}

/// In-place softmax over the allowed entries of a score row. Disallowed
/// entries become exactly zero.
fn masked_softmax<T: Scalar>(row: &mut [T], allow: &[bool]) {
    let mut max = T::neg_infinity();
    for (&x, &a) in row.iter().zip(allow) {
        if a && x > max {
            max = x;
        }
    }
    let mut sum = T::zero();
    for (x, &a) in row.iter_mut().zip(allow) {
        *x = if a { (*x - max).exp() } else { T::zero() };
        sum += *x;
    }
    let inv = T::one() / sum;
    row.iter_mut().for_each(|x| *x *= inv);
}

pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}
