//! Architectures, weights, training and prediction.

pub mod network;
pub mod oracle;
pub mod spec;
pub mod train;

pub use network::{EpochStats, Forward, TrainedModel};
pub use oracle::{LabelOracle, Oracle};
pub use spec::{Dataset, LayerActivation, LayerSpec, ModelRole, ModelSpec, ParamSpec};
pub use train::{one_hot, train, train_with, Augmentation, BatchHook, TrainConfig};
