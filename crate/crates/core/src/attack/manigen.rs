//! Manifold-guided black-box attack.
//!
//! Searches in w-space for an image that stays close to `x` in pixel space
//! while its autoencoder reconstruction (or code) moves as far as possible
//! from that of `x`. The classifier is consulted only through an [`Oracle`].

use super::{box_transform, box_transform_node, l2_distance, l2_to_node, AdvResult, AttackConfig, CheckedIterate};
use crate::autodiff::{Graph, NodeId, Optimizer, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::model::{Oracle, TrainedModel};

/// Which autoencoder output carries the semantic distance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Semantic {
    Reconstruction,
    Code,
}

struct Problem<'a, T: Scalar> {
    /// `[1,H,W,C]` view of the anchor image.
    x: Tensor<T>,
    ae: &'a TrainedModel<T>,
    semantic: Semantic,
    reference: Tensor<T>,
}

impl<'a, T: Scalar> Problem<'a, T> {
    fn new(x: &Tensor<T>, ae: &'a TrainedModel<T>, semantic: Semantic) -> Result<Self> {
        if ae.spec().is_classifier() {
            return Err(Error::Argument("manigen needs an autoencoder".into()));
        }
        if x.shape() != ae.spec().input_shape {
            return Err(Error::shape(format!(
                "image {:?} does not match autoencoder input {:?}",
                x.shape(),
                ae.spec().input_shape
            )));
        }
        let x = x.unsqueeze();
        let reference = match semantic {
            Semantic::Reconstruction => ae.reconstruct(&x)?,
            Semantic::Code => ae.encode(&x)?,
        };
        Ok(Self { x, ae, semantic, reference })
    }

    /// `||adv - x|| - c ||S(adv) - S(x)||` where `adv = box_transform(x, w)`.
    fn objective(&self, g: &mut Graph<T>, w: NodeId, c: f64) -> Result<NodeId> {
        let adv = box_transform_node(g, &self.x, w)?;
        let visual = l2_to_node(g, adv, &self.x)?;
        let (code, recon) = self.ae.autoencoder_nodes(g, adv)?;
        let s = match self.semantic {
            Semantic::Reconstruction => recon,
            Semantic::Code => code,
        };
        let semantic = l2_to_node(g, s, &self.reference)?;
        let pull = g.affine(semantic, T::lit(-c), T::zero())?;
        g.add(visual, pull)
    }

    fn value_and_grad(&self, w: &Tensor<T>, c: f64) -> Result<(f64, Tensor<T>)> {
        let mut g = Graph::new();
        let wi = g.param(w.clone());
        let loss = self.objective(&mut g, wi, c)?;
        g.backward(loss)?;
        let grad = g.grad(wi).unwrap_or_else(|| Tensor::zeros(w.shape()));
        Ok((g.value(loss).item().as_f64(), grad))
    }
}

fn batch_w<T: Scalar>(w: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_same_shape(w, "manigen w")?;
    Ok(w.unsqueeze())
}

/// Objective value for image-shaped `x` and `w`.
pub fn manigen_objective<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    ae: &TrainedModel<T>,
    c: f64,
    semantic: Semantic,
) -> Result<f64> {
    Ok(manigen_objective_with_grad(x, w, ae, c, semantic)?.0)
}

/// Objective value and its gradient with respect to `w`.
pub fn manigen_objective_with_grad<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    ae: &TrainedModel<T>,
    c: f64,
    semantic: Semantic,
) -> Result<(f64, Tensor<T>)> {
    let p = Problem::new(x, ae, semantic)?;
    let (v, g) = p.value_and_grad(&batch_w(w, x)?, c)?;
    Ok((v, g.reshape(x.shape())?))
}

/// Reconstruction-distance attack, the default form.
pub fn manigen_attack<T: Scalar>(
    x: &Tensor<T>,
    true_label: usize,
    oracle: &dyn Oracle<T>,
    ae: &TrainedModel<T>,
    cfg: &AttackConfig,
) -> Result<AdvResult<T>> {
    run(x, true_label, oracle, ae, cfg, Semantic::Reconstruction)
}

/// Same search with the distance taken between encoder codes.
pub fn manigen_encoder_variant<T: Scalar>(
    x: &Tensor<T>,
    true_label: usize,
    oracle: &dyn Oracle<T>,
    ae: &TrainedModel<T>,
    cfg: &AttackConfig,
) -> Result<AdvResult<T>> {
    run(x, true_label, oracle, ae, cfg, Semantic::Code)
}

fn run<T: Scalar>(
    x: &Tensor<T>,
    true_label: usize,
    oracle: &dyn Oracle<T>,
    ae: &TrainedModel<T>,
    cfg: &AttackConfig,
    semantic: Semantic,
) -> Result<AdvResult<T>> {
    cfg.validate()?;
    let problem = Problem::new(x, ae, semantic)?;
    let cs = cfg.c_values();
    let mut queries = 1;
    if !oracle.is_correct(x, true_label)? {
        return Ok(AdvResult {
            adversarial: x.clone(),
            success: true,
            predicted: None,
            distortion: 0.0,
            iteration: 0,
            iterations_run: 0,
            oracle_queries: queries,
            c: cs[0],
            checked: vec![CheckedIterate { c: cs[0], iteration: 0, distortion: 0.0, fooled: true }],
        });
    }

    let mut checked = Vec::new();
    let mut best: Option<(f64, Tensor<T>, f64, usize)> = None;
    let mut last = x.clone();
    let mut iterations_run = 0;
    for &c in &cs {
        let mut w = Tensor::zeros(problem.x.shape());
        let mut opt = Optimizer::<T>::adam(cfg.learning_rate);
        for it in 1..=cfg.iterations {
            let (_, grad) = problem.value_and_grad(&w, c)?;
            opt.step(&mut [&mut w], &[&grad])?;
            iterations_run += 1;
            if it % cfg.check_period != 0 && it != cfg.iterations {
                continue;
            }
            let adv = box_transform(x, &w.clone().reshape(x.shape())?)?;
            let distortion = l2_distance(&adv, x)?;
            let fooled = !oracle.is_correct(&adv, true_label)?;
            queries += 1;
            checked.push(CheckedIterate { c, iteration: it, distortion, fooled });
            if fooled && best.as_ref().is_none_or(|b| distortion < b.0) {
                best = Some((distortion, adv.clone(), c, it));
            }
            if it == cfg.iterations {
                last = adv;
            }
        }
    }

    let (success, adversarial, distortion, c, iteration) = match best {
        Some((d, adv, c, it)) => (true, adv, d, c, it),
        None => {
            let d = l2_distance(&last, x)?;
            (false, last, d, *cs.last().expect("non-empty"), cfg.iterations)
        }
    };
    super::check_box(&adversarial)?;
    Ok(AdvResult {
        adversarial,
        success,
        predicted: None,
        distortion,
        iteration,
        iterations_run,
        oracle_queries: queries,
        c,
        checked,
    })
}
