//! Label-only access to a classifier.

use std::sync::atomic::{AtomicU64, Ordering};

use super::network::TrainedModel;
use crate::autodiff::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Answers only whether a classifier gets an image right.
pub trait Oracle<T: Scalar = f32>: Sync {
    fn is_correct(&self, image: &Tensor<T>, true_label: usize) -> Result<bool>;

    /// Number of `is_correct` calls so far.
    fn queries(&self) -> u64;
}

/// [`Oracle`] over a trained classifier. The model is not reachable
/// through this type.
pub struct LabelOracle<'m, T: Scalar = f32> {
    model: &'m TrainedModel<T>,
    queries: AtomicU64,
}

impl<'m, T: Scalar> LabelOracle<'m, T> {
    pub fn new(model: &'m TrainedModel<T>) -> Result<Self> {
        if !model.spec().is_classifier() {
            return Err(Error::Argument("label oracle needs a classifier".into()));
        }
        Ok(Self { model, queries: AtomicU64::new(0) })
    }
}

impl<T: Scalar> Oracle<T> for LabelOracle<'_, T> {
    fn is_correct(&self, image: &Tensor<T>, true_label: usize) -> Result<bool> {
        self.queries.fetch_add(1, Ordering::Relaxed);
        Ok(self.model.predict_label(image)? == true_label)
    }

    fn queries(&self) -> u64 {
        self.queries.load(Ordering::Relaxed)
    }
}
