//! White-box L2 attack on pre-softmax logits.

use super::{box_transform_node, l2_distance, l2_to_node, AdvResult, AttackConfig, CheckedIterate};
use crate::autodiff::{argmax, Graph, Optimizer, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::TrainedModel;

/// Minimises `||adv - x|| + c * max(0, Z_t(adv) - max_{i != t} Z_i(adv))`
/// over w-space, returning the smallest-distortion misclassified iterate.
pub fn carlini_attack<T: Scalar>(
    x: &Tensor<T>,
    true_label: usize,
    classifier: &TrainedModel<T>,
    cfg: &AttackConfig,
) -> Result<AdvResult<T>> {
    cfg.validate()?;
    if x.shape() != classifier.spec().input_shape {
        return Err(Error::shape(format!(
            "image {:?} does not match classifier input {:?}",
            x.shape(),
            classifier.spec().input_shape
        )));
    }
    let xb = x.unsqueeze();
    let mut checked = Vec::new();
    let mut best: Option<(f64, Tensor<T>, usize, f64, usize)> = None;
    let mut last: Option<(Tensor<T>, usize)> = None;
    let mut iterations_run = 0;
    for c in cfg.c_values() {
        let mut w = Tensor::zeros(xb.shape());
        let mut opt = Optimizer::<T>::adam(cfg.learning_rate);
        // Iterate `it` is evaluated at the start of step `it + 1`; one extra
        // pass scores the final iterate.
        for it in 0..=cfg.iterations {
            let mut g = Graph::new();
            let wi = g.param(w.clone());
            let adv = box_transform_node(&mut g, &xb, wi)?;
            let visual = l2_to_node(&mut g, adv, &xb)?;
            let z = classifier.logits_node(&mut g, adv)?;
            let predicted = argmax(g.value(z).data());
            let distortion = g.value(visual).item().as_f64();
            let fooled = predicted != true_label;
            checked.push(CheckedIterate { c, iteration: it, distortion, fooled });
            if fooled && best.as_ref().is_none_or(|b| distortion < b.0) {
                best = Some((distortion, g.value(adv).batch_item(0), predicted, c, it));
            }
            if it == cfg.iterations {
                last = Some((g.value(adv).batch_item(0), predicted));
                break;
            }
            let margin = g.class_margin(z, &[true_label])?;
            let hinge = g.relu(margin)?;
            let hinge = g.sum(hinge)?;
            let weighted = g.affine(hinge, T::lit(c), T::zero())?;
            let loss = g.add(visual, weighted)?;
            g.backward(loss)?;
            let grad = g.grad(wi).unwrap_or_else(|| Tensor::zeros(w.shape()));
            opt.step(&mut [&mut w], &[&grad])?;
            iterations_run += 1;
        }
    }
    let (success, adversarial, predicted, c, iteration) = match best {
        Some((_, adv, p, c, it)) => (true, adv, p, c, it),
        None => {
            let (adv, p) = last.expect("at least one iterate");
            (false, adv, p, *cfg.c_values().last().expect("non-empty"), cfg.iterations)
        }
    };
    super::check_box(&adversarial)?;
    let distortion = l2_distance(&adversarial, x)?;
    Ok(AdvResult {
        adversarial,
        success,
        predicted: Some(predicted),
        distortion,
        iteration,
        iterations_run,
        oracle_queries: 0,
        c,
        checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::AttackKind;
    use crate::model::{Dataset, ModelSpec};

    #[test]
    fn already_misclassified_returns_near_original() {
        let clf = TrainedModel::<f32>::init(ModelSpec::classifier(Dataset::Mnist), 5).unwrap().cast::<f64>();
        let x = Tensor::from_fn(&[28, 28, 1], |i| (i % 13) as f64 / 13.0);
        let p = clf.predict_label(&x).unwrap();
        let wrong = (p + 1) % 10;
        let cfg = AttackConfig { iterations: 20, ..AttackConfig::new(AttackKind::Carlini) };
        let r = carlini_attack(&x, wrong, &clf, &cfg).unwrap();
        assert!(r.success);
        assert_eq!(r.iteration, 0);
        assert!(r.distortion < 1e-3);
        assert_eq!(r.predicted, Some(p));
        assert_eq!(clf.logits_queries(), 21);
    }
}
