//! Minimal reverse-mode differentiable tensor engine.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod tensor;

pub use graph::{softmax, softmax_last_axis, Activation, Graph, LossKind, NodeId, PROB_CLAMP};
pub use kernels::Padding;
pub use optim::{Optimizer, OptimizerKind};
pub use tensor::{argmax, Scalar, Tensor};
