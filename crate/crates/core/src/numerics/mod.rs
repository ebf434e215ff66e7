//! Dense tensors with reverse-mode differentiation, sized for a small
//! decoder-only transformer.

mod adam;
mod gradcheck;
mod graph;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::grad_check;
pub use graph::{log_sum_exp, AttentionSpec, Gradients, Graph, NodeId, PastKv, LAYER_NORM_EPS};
pub use tensor::{matmul, Scalar, Tensor};
