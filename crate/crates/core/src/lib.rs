pub mod attack;
pub mod autodiff;
pub mod error;
pub mod eval;
pub mod data;
pub mod defense;
pub mod model;

pub use autodiff::{Activation, Graph, LossKind, NodeId, Optimizer, OptimizerKind, Padding, Scalar, Tensor};
pub use error::{Error, Result};
pub use data::DatasetSplit;
pub use model::{Dataset, LabelOracle, ModelSpec, Oracle, TrainConfig, TrainedModel};
