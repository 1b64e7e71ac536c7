//! Scaled datasets, train/test separation and seeded sampling.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{cifar, idx};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Dataset;

/// Undecoded images as bytes in `N x H x W x C` order, plus labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl RawImages {
    pub fn to_tensor(&self) -> Result<Tensor<f32>> {
        Tensor::new(vec![self.count, self.height, self.width, self.channels], scale(&self.pixels))
    }
}

/// `byte / 255`.
pub fn scale(raw: &[u8]) -> Vec<f32> {
    raw.iter().map(|&b| f32::from(b) / 255.0).collect()
}

/// Scaled train and test sets of one dataset.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pub dataset: Dataset,
    pub train_images: Tensor<f32>,
    pub train_labels: Vec<u8>,
    pub test_images: Tensor<f32>,
    pub test_labels: Vec<u8>,
    /// Seed of a reshuffled separation; `None` for the official split.
    pub split_seed: Option<u64>,
}

const MNIST_FILES: [&str; 4] =
    ["train-images-idx3-ubyte", "train-labels-idx1-ubyte", "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"];

impl DatasetSplit {
    pub fn from_raw(dataset: Dataset, train: &RawImages, test: &RawImages) -> Result<Self> {
        Ok(Self {
            dataset,
            train_images: train.to_tensor()?,
            train_labels: train.labels.clone(),
            test_images: test.to_tensor()?,
            test_labels: test.labels.clone(),
            split_seed: None,
        })
    }

    /// Files this dataset needs inside `dir`.
    pub fn required_files(dataset: Dataset, dir: &Path) -> Vec<PathBuf> {
        match dataset {
            Dataset::Mnist => MNIST_FILES.iter().map(|f| dir.join(f)).collect(),
            Dataset::Cifar10 => {
                let base = if dir.join("cifar-10-batches-bin").is_dir() { dir.join("cifar-10-batches-bin") } else { dir.to_path_buf() };
                let mut v: Vec<PathBuf> = (1..=5).map(|i| base.join(format!("data_batch_{i}.bin"))).collect();
                v.push(base.join("test_batch.bin"));
                v
            }
        }
    }

    /// Official split from the standard file names in `dir`.
    pub fn load(dataset: Dataset, dir: &Path) -> Result<Self> {
        let files = Self::required_files(dataset, dir);
        if let Some(missing) = files.iter().find(|p| !p.is_file()) {
            return Err(Error::Validation(format!("missing dataset file {}", missing.display())));
        }
        let (train, test) = match dataset {
            Dataset::Mnist => (idx::load_idx(&files[0], &files[1])?, idx::load_idx(&files[2], &files[3])?),
            Dataset::Cifar10 => (cifar::load_cifar_bin(&files[..5])?, cifar::load_cifar_bin(&files[5..])?),
        };
        let [h, w, c] = dataset.image_shape();
        for raw in [&train, &test] {
            if [raw.height, raw.width, raw.channels] != [h, w, c] {
                return Err(Error::Validation(format!(
                    "{dataset} images are {}x{}x{}",
                    raw.height, raw.width, raw.channels
                )));
            }
        }
        Self::from_raw(dataset, &train, &test)
    }

    /// Pools train and test and re-separates them with the same sizes.
    pub fn resplit(self, seed: u64) -> Result<Self> {
        let n_train = self.train_labels.len();
        let images = Tensor::concat(&self.train_images, &self.test_images)?;
        let labels: Vec<u8> = self.train_labels.iter().chain(&self.test_labels).copied().collect();
        let mut order: Vec<usize> = (0..labels.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (tr, te) = order.split_at(n_train);
        Ok(Self {
            dataset: self.dataset,
            train_images: images.select(tr),
            train_labels: tr.iter().map(|&i| labels[i]).collect(),
            test_images: images.select(te),
            test_labels: te.iter().map(|&i| labels[i]).collect(),
            split_seed: Some(seed),
        })
    }

    /// Seeded subset of the training set; `count >= len` returns everything.
    pub fn train_subset(&self, count: usize, seed: u64) -> (Tensor<f32>, Vec<u8>) {
        let idx = seeded_subset(self.train_labels.len(), count, seed);
        (self.train_images.select(&idx), idx.iter().map(|&i| self.train_labels[i]).collect())
    }
}

/// `count` distinct indices below `n`, in ascending order.
pub fn seeded_subset(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if count >= n {
        return order;
    }
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.truncate(count);
    order.sort_unstable();
    order
}

/// Seeded class-stratified selection of `count` indices among those where
/// `eligible` holds. Classes are visited round-robin, so any prefix of the
/// result is as balanced as the pool allows.
pub fn stratified_sample(labels: &[u8], count: usize, seed: u64, eligible: impl Fn(usize) -> bool) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); 10];
    for (i, &l) in labels.iter().enumerate() {
        if eligible(i) {
            pools[l as usize].push(i);
        }
    }
    for p in &mut pools {
        p.shuffle(&mut rng);
        p.reverse();
    }
    let mut out = Vec::with_capacity(count);
    while out.len() < count && pools.iter().any(|p| !p.is_empty()) {
        for p in &mut pools {
            if out.len() == count {
                break;
            }
            if let Some(i) = p.pop() {
                out.push(i);
            }
        }
    }
    out
}
