//! Adversarial training with freshly generated gradient-sign examples.

use crate::attack::fgsm_batch;
use crate::autodiff::Tensor;
use crate::error::Result;
use crate::model::{train_with, Dataset, ModelSpec, TrainConfig, TrainedModel};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdvTrainRecipe {
    pub epsilon: f64,
}

impl AdvTrainRecipe {
    pub fn for_dataset(dataset: Dataset) -> Self {
        match dataset {
            Dataset::Mnist => Self { epsilon: 0.25 },
            Dataset::Cifar10 => Self { epsilon: 0.03 },
        }
    }
}

/// Trains `spec` with every batch paired 1:1 with its gradient-sign
/// counterpart, generated from the weights current at that batch.
pub fn adversarial_training(
    spec: ModelSpec,
    images: &Tensor<f32>,
    labels: &[u8],
    recipe: AdvTrainRecipe,
    cfg: &TrainConfig,
) -> Result<TrainedModel<f32>> {
    let model = TrainedModel::init(spec, cfg.seed)?;
    let mut hook = |m: &TrainedModel<f32>, x: &Tensor<f32>, y: &[u8]| -> Result<Option<Tensor<f32>>> {
        let y: Vec<usize> = y.iter().map(|&v| v as usize).collect();
        Ok(Some(fgsm_batch(x, &y, m, recipe.epsilon)?))
    };
    train_with(model, images, Some(labels), cfg, Some(&mut hook))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn processes_twice_the_clean_examples() {
        let x = Tensor::from_fn(&[24, 28, 28, 1], |i| ((i * 13) % 29) as f32 / 28.0);
        let y: Vec<u8> = (0..24).map(|i| (i % 10) as u8).collect();
        let cfg = TrainConfig { epochs: 2, batch_size: 10, ..TrainConfig::classifier(Dataset::Mnist) };
        let m = adversarial_training(ModelSpec::classifier(Dataset::Mnist), &x, &y, AdvTrainRecipe::for_dataset(Dataset::Mnist), &cfg)
            .unwrap();
        assert_eq!(m.history().len(), 2);
        assert!(m.history().iter().all(|h| h.examples == 48));
        assert_eq!(m.spec(), &ModelSpec::classifier(Dataset::Mnist));
    }
}
