//! Gradient-sign attacks: single step and iterated.

use crate::autodiff::{Graph, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::TrainedModel;

/// Sign of the cross-entropy gradient with respect to a `[N,H,W,C]` batch.
fn loss_gradient_sign<T: Scalar>(classifier: &TrainedModel<T>, batch: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    if labels.len() != batch.batch_len() || labels.iter().any(|&l| l >= 10) {
        return Err(Error::Argument(format!("{} labels for a batch of {}", labels.len(), batch.batch_len())));
    }
    let mut target = Tensor::zeros(&[labels.len(), 10]);
    for (i, &l) in labels.iter().enumerate() {
        target.data_mut()[i * 10 + l] = T::one();
    }
    let mut g = Graph::new();
    let xi = g.param(batch.clone());
    let z = classifier.logits_node(&mut g, xi)?;
    let loss = g.softmax_cross_entropy(z, &target)?;
    g.backward(loss)?;
    let grad = g.grad(xi).unwrap_or_else(|| Tensor::zeros(batch.shape()));
    Ok(grad.map(|v| if v > T::zero() { T::one() } else if v < T::zero() { -T::one() } else { T::zero() }))
}

fn step<T: Scalar>(x: &Tensor<T>, sign: &Tensor<T>, size: f64) -> Result<Tensor<T>> {
    let s = T::lit(size);
    x.zip_map(sign, |v, d| (v + s * d).max(T::zero()).min(T::one()))
}

/// `clip(x + eps * sign(grad_x CE), 0, 1)` over a batch.
pub fn fgsm_batch<T: Scalar>(
    images: &Tensor<T>,
    labels: &[usize],
    classifier: &TrainedModel<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let batch = classifier.as_batch(images)?;
    let sign = loss_gradient_sign(classifier, &batch, labels)?;
    step(&batch, &sign, epsilon)
}

/// Single-image gradient-sign step.
pub fn fgsm<T: Scalar>(x: &Tensor<T>, true_label: usize, classifier: &TrainedModel<T>, epsilon: f64) -> Result<Tensor<T>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Argument(format!("epsilon {epsilon} outside [0,1)")));
    }
    let adv = fgsm_batch(x, &[true_label], classifier, epsilon)?;
    adv.reshape(x.shape())
}

/// `steps` gradient-sign steps of size `alpha`, each projected back into the
/// `epsilon` max-norm ball around `x` and into [0,1].
pub fn bim<T: Scalar>(
    x: &Tensor<T>,
    true_label: usize,
    classifier: &TrainedModel<T>,
    epsilon: f64,
    alpha: f64,
    steps: usize,
) -> Result<Tensor<T>> {
    if steps == 0 || alpha > epsilon || !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Argument(format!("bim: epsilon {epsilon}, alpha {alpha}, steps {steps}")));
    }
    let x0 = classifier.as_batch(x)?;
    let e = T::lit(epsilon);
    let mut adv = x0.clone();
    for _ in 0..steps {
        let sign = loss_gradient_sign(classifier, &adv, &[true_label])?;
        let moved = step(&adv, &sign, alpha)?;
        adv = moved.zip_map(&x0, |v, o| v.max(o - e).min(o + e).max(T::zero()).min(T::one()))?;
    }
    adv.reshape(x.shape())
}
