//! Mini-batch training for classifiers and autoencoders.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::network::{EpochStats, TrainedModel};
use super::spec::{Dataset, ModelSpec};
use crate::autodiff::{argmax, Graph, LossKind, Optimizer, OptimizerKind, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Augmentation {
    None,
    /// Random width/height shift by up to 20% (zero fill) and horizontal flip.
    ShiftFlip,
}

impl Augmentation {
    pub fn as_str(self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::ShiftFlip => "shift_flip",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Augmentation::None),
            "shift_flip" => Some(Augmentation::ShiftFlip),
            _ => None,
        }
    }
}

pub const SHIFT_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub loss: LossKind,
    pub batch_size: usize,
    pub shuffle: bool,
    pub epochs: usize,
    pub augmentation: Augmentation,
    pub seed: u64,
}

impl TrainConfig {
    /// Full-scale autoencoder recipe.
    pub fn autoencoder(dataset: Dataset) -> Self {
        match dataset {
            Dataset::Mnist => Self {
                optimizer: OptimizerKind::Adam,
                learning_rate: 0.01,
                loss: LossKind::Bce,
                batch_size: 128,
                shuffle: true,
                epochs: 50,
                augmentation: Augmentation::None,
                seed: 0,
            },
            Dataset::Cifar10 => Self {
                optimizer: OptimizerKind::Adam,
                learning_rate: 0.01,
                loss: LossKind::Mse,
                batch_size: 256,
                shuffle: true,
                epochs: 100,
                augmentation: Augmentation::None,
                seed: 0,
            },
        }
    }

    /// Full-scale classifier recipe.
    pub fn classifier(dataset: Dataset) -> Self {
        match dataset {
            Dataset::Mnist => Self {
                optimizer: OptimizerKind::Adam,
                learning_rate: 0.01,
                loss: LossKind::CrossEntropy,
                batch_size: 128,
                shuffle: true,
                epochs: 100,
                augmentation: Augmentation::None,
                seed: 0,
            },
            Dataset::Cifar10 => Self {
                optimizer: OptimizerKind::Sgd,
                learning_rate: 0.01,
                loss: LossKind::CrossEntropy,
                batch_size: 32,
                shuffle: true,
                epochs: 350,
                augmentation: Augmentation::ShiftFlip,
                seed: 0,
            },
        }
    }

    pub fn for_spec(spec: &ModelSpec) -> Self {
        if spec.is_classifier() {
            Self::classifier(spec.dataset)
        } else {
            Self::autoencoder(spec.dataset)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Argument("batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Argument(format!("learning rate {} must be positive", self.learning_rate)));
        }
        Ok(())
    }
}

/// Extra examples for a batch, computed from the current weights. Returned
/// images carry the same labels as the clean batch, in order.
pub type BatchHook<'a> = dyn FnMut(&TrainedModel<f32>, &Tensor<f32>, &[u8]) -> Result<Option<Tensor<f32>>> + 'a;

/// Trains `spec` from a fresh seeded initialization.
///
/// `labels` is required for classifiers and ignored for autoencoders, whose
/// targets are the inputs themselves.
pub fn train(spec: ModelSpec, images: &Tensor<f32>, labels: Option<&[u8]>, cfg: &TrainConfig) -> Result<TrainedModel<f32>> {
    let model = TrainedModel::init(spec, cfg.seed)?;
    train_with(model, images, labels, cfg, None)
}

/// Continues training `model`; `hook`, when given, may append one extra
/// example per clean example to every batch.
pub fn train_with(
    mut model: TrainedModel<f32>,
    images: &Tensor<f32>,
    labels: Option<&[u8]>,
    cfg: &TrainConfig,
    mut hook: Option<&mut BatchHook<'_>>,
) -> Result<TrainedModel<f32>> {
    cfg.validate()?;
    let classifier = model.spec().is_classifier();
    let batch = model.as_batch(images)?;
    let n = batch.batch_len();
    let labels = match (classifier, labels) {
        (true, Some(l)) if l.len() == n => Some(l),
        (true, Some(l)) => {
            return Err(Error::Argument(format!("{} labels for {n} images", l.len())));
        }
        (true, None) => return Err(Error::Argument("classifier training needs labels".into())),
        (false, _) => None,
    };
    if classifier && cfg.loss != LossKind::CrossEntropy {
        return Err(Error::Argument("classifiers train with cross-entropy".into()));
    }
    if let Some(l) = labels {
        if let Some(bad) = l.iter().find(|&&v| v >= 10) {
            return Err(Error::Argument(format!("label {bad} outside 0..10")));
        }
    }

    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let start_epoch = model.epochs_trained();
    for e in 0..cfg.epochs {
        let epoch = start_epoch + e + 1;
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(cfg.seed, epoch));
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let mut clean_seen = 0usize;
        let mut seen = 0usize;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let diverged = |msg: String| Error::Diverged { epoch, batch: b + 1, msg };
            let mut x = batch.select(idx);
            if cfg.augmentation == Augmentation::ShiftFlip {
                augment(&mut x, &mut rng);
            }
            let mut y: Option<Vec<u8>> = labels.map(|l| idx.iter().map(|&i| l[i]).collect());
            let clean = idx.len();
            if let Some(h) = hook.as_deref_mut() {
                if let Some(extra) = h(&model, &x, y.as_deref().unwrap_or(&[]))? {
                    if extra.batch_len() != clean {
                        return Err(Error::Argument("batch hook must return one image per example".into()));
                    }
                    x = Tensor::concat(&x, &extra)?;
                    if let Some(yy) = y.as_mut() {
                        yy.extend_from_within(..);
                    }
                }
            }
            let rows = x.batch_len();

            let mut g = Graph::<f32>::new();
            let params = model.bind(&mut g, true);
            let xi = g.constant(x.clone());
            let f = model
                .forward(&mut g, xi, &params, Some(&mut rng))
                .map_err(|e| diverged(e.to_string()))?;
            let loss = match &y {
                Some(yy) => {
                    let logits = f.logits.expect("classifier head");
                    let z = g.value(logits).data();
                    correct += yy[..clean]
                        .iter()
                        .enumerate()
                        .filter(|&(r, &t)| argmax(&z[r * 10..(r + 1) * 10]) == t as usize)
                        .count();
                    g.softmax_cross_entropy(logits, &one_hot(yy))
                }
                None => g.loss(cfg.loss, f.output, &x),
            }
            .map_err(|e| diverged(e.to_string()))?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(diverged(format!("loss is {value}")));
            }
            g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = params
                .iter()
                .map(|&p| g.grad(p).unwrap_or_else(|| Tensor::zeros(g.value(p).shape())))
                .collect();
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            let mut weight_refs: Vec<&mut Tensor<f32>> = model.weights_mut().iter_mut().collect();
            opt.step(&mut weight_refs, &grad_refs).map_err(|e| diverged(e.to_string()))?;

            loss_sum += value * rows as f64;
            seen += rows;
            clean_seen += clean;
        }
        model.push_history(EpochStats {
            epoch,
            loss: loss_sum / seen as f64,
            accuracy: classifier.then(|| correct as f64 / clean_seen as f64),
            examples: seen,
        });
    }
    Ok(model)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

pub fn one_hot(labels: &[u8]) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[labels.len(), 10]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * 10 + l as usize] = 1.0;
    }
    t
}

/// In-place random shift and flip of every image in an `[N,H,W,C]` batch.
fn augment(batch: &mut Tensor<f32>, rng: &mut ChaCha8Rng) {
    let [n, h, w, c] = [batch.shape()[0], batch.shape()[1], batch.shape()[2], batch.shape()[3]];
    let max_dy = (SHIFT_FRACTION * h as f64).round() as i64;
    let max_dx = (SHIFT_FRACTION * w as f64).round() as i64;
    let item = h * w * c;
    for i in 0..n {
        let dy = rng.random_range(-max_dy..=max_dy);
        let dx = rng.random_range(-max_dx..=max_dx);
        let flip = rng.random_bool(0.5);
        let src = batch.data()[i * item..(i + 1) * item].to_vec();
        let dst = &mut batch.data_mut()[i * item..(i + 1) * item];
        shift_flip(&src, dst, h, w, c, dy, dx, flip);
    }
}

/// `dst[y][x] = src[y - dy][x' - dx]` where `x'` is mirrored when `flip`.
#[allow(clippy::too_many_arguments)]
fn shift_flip(src: &[f32], dst: &mut [f32], h: usize, w: usize, c: usize, dy: i64, dx: i64, flip: bool) {
    for y in 0..h {
        for x in 0..w {
            let sy = y as i64 - dy;
            let sx = x as i64 - dx;
            let o = (y * w + x) * c;
            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                dst[o..o + c].fill(0.0);
                continue;
            }
            let sx = if flip { w - 1 - sx as usize } else { sx as usize };
            let s = (sy as usize * w + sx) * c;
            dst[o..o + c].copy_from_slice(&src[s..s + c]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two separable synthetic classes: bright top half vs bright bottom half.
    fn toy_digits(n: usize, seed: u64) -> (Tensor<f32>, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8 * 3).collect();
        let mut data = Vec::with_capacity(n * 784);
        for &l in &labels {
            for y in 0..28 {
                for _ in 0..28 {
                    let on = (y < 14) == (l == 0);
                    data.push(if on { 0.6 + 0.4 * rng.random::<f32>() } else { 0.1 * rng.random::<f32>() });
                }
            }
        }
        (Tensor::new(vec![n, 28, 28, 1], data).unwrap(), labels)
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, batch_size: 16, seed: 4, ..TrainConfig::classifier(Dataset::Mnist) }
    }

    #[test]
    fn defaults_follow_recipes() {
        let a = TrainConfig::autoencoder(Dataset::Mnist);
        assert_eq!((a.optimizer, a.learning_rate, a.loss, a.batch_size, a.epochs), (OptimizerKind::Adam, 0.01, LossKind::Bce, 128, 50));
        let a = TrainConfig::autoencoder(Dataset::Cifar10);
        assert_eq!((a.loss, a.batch_size, a.epochs), (LossKind::Mse, 256, 100));
        let c = TrainConfig::classifier(Dataset::Mnist);
        assert_eq!((c.optimizer, c.batch_size, c.epochs, c.augmentation), (OptimizerKind::Adam, 128, 100, Augmentation::None));
        let c = TrainConfig::classifier(Dataset::Cifar10);
        assert_eq!((c.optimizer, c.batch_size, c.epochs, c.augmentation), (OptimizerKind::Sgd, 32, 350, Augmentation::ShiftFlip));
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (x, y) = toy_digits(8, 1);
        let spec = ModelSpec::classifier(Dataset::Mnist);
        let m = train(spec.clone(), &x, Some(&y), &quick(0)).unwrap();
        let init = TrainedModel::<f32>::init(spec, 4).unwrap();
        assert_eq!(m.weights(), init.weights());
        assert!(m.history().is_empty());
    }

    #[test]
    fn classifier_learns_and_is_deterministic() {
        let (x, y) = toy_digits(64, 2);
        let spec = ModelSpec::classifier(Dataset::Mnist);
        let cfg = TrainConfig { learning_rate: 0.005, ..quick(3) };
        let a = train(spec.clone(), &x, Some(&y), &cfg).unwrap();
        let b = train(spec, &x, Some(&y), &cfg).unwrap();
        assert_eq!(a.weights(), b.weights());
        assert_eq!(a.history().len(), 3);
        assert!(a.history()[2].loss < a.history()[0].loss);
        assert_eq!(a.predict_labels(&x).unwrap().iter().zip(&y).filter(|(p, t)| **p == **t as usize).count(), 64);
    }

    #[test]
    fn autoencoder_loss_improves() {
        let (x, _) = toy_digits(32, 3);
        let cfg = TrainConfig { epochs: 3, batch_size: 8, seed: 1, ..TrainConfig::autoencoder(Dataset::Mnist) };
        let m = train(ModelSpec::autoencoder(Dataset::Mnist), &x, None, &cfg).unwrap();
        let h = m.history();
        assert!(h[2].loss < h[0].loss, "{h:?}");
        assert!(h.iter().all(|s| s.accuracy.is_none()));
    }

    #[test]
    fn hook_doubles_examples() {
        let (x, y) = toy_digits(20, 5);
        let mut calls = 0;
        let mut hook = |_: &TrainedModel<f32>, b: &Tensor<f32>, l: &[u8]| -> Result<Option<Tensor<f32>>> {
            calls += 1;
            assert_eq!(b.batch_len(), l.len());
            Ok(Some(b.map(|v| 1.0 - v)))
        };
        let m = train_with(
            TrainedModel::init(ModelSpec::classifier(Dataset::Mnist), 0).unwrap(),
            &x,
            Some(&y),
            &quick(2),
            Some(&mut hook),
        )
        .unwrap();
        assert_eq!(calls, 4);
        assert!(m.history().iter().all(|s| s.examples == 40));
    }

    #[test]
    fn nan_input_aborts_with_location() {
        let (mut x, y) = toy_digits(40, 6);
        x.data_mut()[784 * 39] = f32::NAN;
        let cfg = TrainConfig { shuffle: false, ..quick(1) };
        match train(ModelSpec::classifier(Dataset::Mnist), &x, Some(&y), &cfg) {
            Err(Error::Diverged { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 3)),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn shift_and_flip_move_pixels() {
        let src: Vec<f32> = (0..9).map(|v| v as f32).collect();
        let mut dst = vec![0.0; 9];
        shift_flip(&src, &mut dst, 3, 3, 1, 0, 0, true);
        assert_eq!(dst, [2., 1., 0., 5., 4., 3., 8., 7., 6.]);
        shift_flip(&src, &mut dst, 3, 3, 1, 1, 0, false);
        assert_eq!(dst, [0., 0., 0., 0., 1., 2., 3., 4., 5.]);
        shift_flip(&src, &mut dst, 3, 3, 1, 0, -1, false);
        assert_eq!(dst, [1., 2., 0., 4., 5., 0., 7., 8., 0.]);
    }

    #[test]
    fn missing_labels_rejected() {
        let (x, _) = toy_digits(4, 0);
        assert!(train(ModelSpec::classifier(Dataset::Mnist), &x, None, &quick(1)).is_err());
    }
}
