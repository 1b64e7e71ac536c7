//! Defended prediction pipelines.

pub mod advtrain;
pub mod magnet;

pub use advtrain::{adversarial_training, AdvTrainRecipe};
pub use magnet::{jensen_shannon, magnet_build, quantile_threshold, DefenseVerdict, DetectorKind, MagnetConfig, MagnetDefense, Outcome};
