//! Adversarial example generators and the shared box transform.

pub mod carlini;
pub mod gradient_sign;
pub mod manigen;

pub use carlini::carlini_attack;
pub use gradient_sign::{bim, fgsm, fgsm_batch};
pub use manigen::{manigen_attack, manigen_encoder_variant, manigen_objective, manigen_objective_with_grad, Semantic};

use crate::autodiff::{Activation, Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

/// Keeps `2(x - 1/2)` strictly inside (-1, 1) so its atanh is finite.
pub const BOX_GUARD: f64 = 0.99999;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttackKind {
    ManiGen,
    ManiGenEncoder,
    Carlini,
    Fgsm,
    Bim,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::ManiGen => "manigen",
            AttackKind::ManiGenEncoder => "manigen_encoder",
            AttackKind::Carlini => "carlini",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "manigen" => AttackKind::ManiGen,
            "manigen_encoder" => AttackKind::ManiGenEncoder,
            "carlini" => AttackKind::Carlini,
            "fgsm" => AttackKind::Fgsm,
            "bim" => AttackKind::Bim,
            other => return Err(Error::Argument(format!("unknown attack kind {other:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Trade-off weight of the adversarial term.
    pub c: f64,
    /// When non-empty, every value is tried and the smallest-distortion
    /// success wins; `c` is then ignored.
    pub c_sweep: Vec<f64>,
    pub iterations: usize,
    pub learning_rate: f64,
    /// Oracle is consulted every this many iterations.
    pub check_period: usize,
    pub epsilon: f64,
    pub alpha: f64,
    pub steps: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(kind: AttackKind) -> Self {
        Self {
            kind,
            c: 1.0,
            c_sweep: Vec::new(),
            iterations: 1000,
            learning_rate: 0.01,
            check_period: 10,
            epsilon: 0.25,
            alpha: 0.05,
            steps: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(m));
        match self.kind {
            AttackKind::ManiGen | AttackKind::ManiGenEncoder | AttackKind::Carlini => {
                if !(self.c > 0.0 && self.c.is_finite()) || self.c_sweep.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
                    return bad(format!("c must be positive, got {} / {:?}", self.c, self.c_sweep));
                }
                if self.iterations == 0 {
                    return bad("iterations must be at least 1".into());
                }
                if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
                    return bad(format!("learning rate {} must be positive", self.learning_rate));
                }
                if self.check_period == 0 {
                    return bad("check period must be at least 1".into());
                }
            }
            AttackKind::Fgsm | AttackKind::Bim => {
                if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
                    return bad(format!("epsilon {} outside (0,1)", self.epsilon));
                }
                if self.kind == AttackKind::Bim {
                    if self.steps == 0 || self.alpha.is_nan() || self.alpha <= 0.0 || self.alpha > self.epsilon {
                        return bad(format!("bim needs 0 < alpha <= epsilon and steps >= 1, got alpha {}", self.alpha));
                    }
                    if self.alpha * self.steps as f64 + 1e-12 < self.epsilon {
                        return bad(format!("alpha * steps = {} cannot reach epsilon {}", self.alpha * self.steps as f64, self.epsilon));
                    }
                }
            }
        }
        Ok(())
    }

    /// Trade-off values this config runs.
    pub fn c_values(&self) -> Vec<f64> {
        if self.c_sweep.is_empty() {
            vec![self.c]
        } else {
            self.c_sweep.clone()
        }
    }
}

/// One oracle or logits check along an optimisation run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckedIterate {
    pub c: f64,
    pub iteration: usize,
    pub distortion: f64,
    pub fooled: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdvResult<T: Scalar = f32> {
    pub adversarial: Tensor<T>,
    pub success: bool,
    /// Label the target assigns; unknown to black-box attacks.
    pub predicted: Option<usize>,
    pub distortion: f64,
    /// Iteration at which the returned example was produced.
    pub iteration: usize,
    pub iterations_run: usize,
    pub oracle_queries: u64,
    /// Trade-off value that produced the returned example.
    pub c: f64,
    pub checked: Vec<CheckedIterate>,
}

impl<T: Scalar> AdvResult<T> {
    /// Smallest distortion among fooling checks; `None` if none fooled.
    pub fn best_checked(&self) -> Option<f64> {
        self.checked.iter().filter(|c| c.fooled).map(|c| c.distortion).min_by(f64::total_cmp)
    }
}

/// `atanh(2(x - 1/2) * BOX_GUARD)`, the w-space anchor of `x`.
pub fn box_anchor<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let half = T::lit(0.5);
    let two = T::lit(2.0);
    let guard = T::lit(BOX_GUARD);
    x.map(|v| ((v - half) * two * guard).atanh())
}

/// `tanh(anchor(x) + w) / 2 + 1/2`, always strictly inside (0,1).
pub fn box_transform<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    if !w.all_finite() {
        return Err(Error::Numeric("box_transform: non-finite w".into()));
    }
    let half = T::lit(0.5);
    box_anchor(x).zip_map(w, |a, d| (a + d).tanh() * half + half)
}

/// Graph form of [`box_transform`] with `w` an existing node.
pub fn box_transform_node<T: Scalar>(g: &mut Graph<T>, x: &Tensor<T>, w: NodeId) -> Result<NodeId> {
    let z = g.add_const(w, &box_anchor(x))?;
    let t = g.activation(z, Activation::Tanh)?;
    g.affine(t, T::lit(0.5), T::lit(0.5))
}

pub fn l2_distance<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "l2_distance")?;
    Ok(a.data().iter().zip(b.data()).map(|(&p, &q)| (p - q).as_f64().powi(2)).sum::<f64>().sqrt())
}

/// `||node - target||_2` as a graph node.
pub(crate) fn l2_to_node<T: Scalar>(g: &mut Graph<T>, node: NodeId, target: &Tensor<T>) -> Result<NodeId> {
    let diff = g.add_const(node, &target.map(|v| -v))?;
    g.l2_norm(diff)
}

/// The transform maps into the open box exactly, but f32 rounding of
/// `0.5 * tanh + 0.5` can land on 0 or 1, so only the closed box is checked.
pub(crate) fn check_box<T: Scalar>(adv: &Tensor<T>) -> Result<()> {
    if adv.data().iter().all(|&v| (0.0..=1.0).contains(&v.as_f64())) {
        Ok(())
    } else {
        Err(Error::Numeric("adversarial example left the image box".into()))
    }
}
