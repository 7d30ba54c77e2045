//! Minimal reverse-mode autodiff with the layers needed for CORNet-Z and
//! VGG-style networks, plain SGD, checkpoints and gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod ops;
mod real;
mod tensor;
mod network;

pub use checkpoint::{encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use network::{
    build_network, Architecture, BlockSpec, ConvSpec, ForwardNodes, ForwardOutput, Layer, LayerPlan, Mode,
    Network, NetworkSpec,
};
pub use real::{gemm, MatRef, Real};
pub use tensor::Tensor;

/// Mean cross-entropy of `logits` against class-index `labels`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> crate::Result<f64> {
    ops::softmax_cross_entropy(logits, labels).map(|(l, _)| l.as_f64())
}
