use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Adam,
    Sgd,
    Adadelta,
}

impl OptimizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adadelta => "adadelta",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "adam" => Some(Self::Adam),
            "sgd" => Some(Self::Sgd),
            "adadelta" => Some(Self::Adadelta),
            _ => None,
        }
    }
}

/// Optimizer with its per-parameter accumulators.
///
/// Accumulators are allocated lazily on the first step and are then pinned
/// to the shapes seen there.
#[derive(Clone, Debug)]
pub struct Optimizer<T: Scalar = f32> {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    // Adam: first/second moments. Adadelta: E[g^2] / E[dx^2].
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self { kind, learning_rate, step: 0, first: Vec::new(), second: Vec::new() }
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adam, learning_rate)
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Sgd, learning_rate)
    }

    pub fn adadelta(learning_rate: f64) -> Self {
        Self::new(OptimizerKind::Adadelta, learning_rate)
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter in place.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[&Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(format!(
                "optimizer got {} params and {} grads",
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            p.expect_same_shape(g, "optimizer step")?;
        }
        if grads.iter().any(|g| !g.all_finite()) {
            return Err(Error::Numeric("non-finite gradient passed to optimizer".into()));
        }
        if self.step == 0 {
            self.first = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.second = self.first.clone();
        } else if self.first.len() != params.len()
            || self.first.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len())
        {
            return Err(Error::shape("optimizer parameter set changed between steps"));
        }
        self.step += 1;
        let lr = T::lit(self.learning_rate);
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *w = *w - lr * gv;
                    }
                }
            }
            OptimizerKind::Adam => {
                let (b1, b2, eps) = (T::lit(ADAM_BETA1), T::lit(ADAM_BETA2), T::lit(ADAM_EPS));
                let t = self.step as i32;
                let c1 = T::one() - b1.powi(t);
                let c2 = T::one() - b2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (T::one() - b1) * gv;
                        v[j] = b2 * v[j] + (T::one() - b2) * gv * gv;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Adadelta => {
                let (rho, eps) = (T::lit(ADADELTA_RHO), T::lit(ADADELTA_EPS));
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (eg, ex) = (&mut self.first[i], &mut self.second[i]);
                    for (j, (w, &gv)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        eg[j] = rho * eg[j] + (T::one() - rho) * gv * gv;
                        let dx = -((ex[j] + eps).sqrt() / (eg[j] + eps).sqrt()) * gv;
                        ex[j] = rho * ex[j] + (T::one() - rho) * dx * dx;
                        *w = *w + lr * dx;
                    }
                }
            }
        }
        Ok(())
    }
}
