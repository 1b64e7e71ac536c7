//! Autoencoder detector plus reformer.

use crate::autodiff::{argmax, softmax, Tensor};
use crate::error::{Error, Result};
use crate::model::TrainedModel;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DetectorKind {
    /// `||AE(x) - x||_2 / sqrt(m)`.
    ReconstructionError,
    /// Jensen-Shannon divergence between the tempered class distributions of
    /// `x` and `AE(x)`.
    ProbDivergence,
}

impl DetectorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            DetectorKind::ReconstructionError => "reconstruction_error",
            DetectorKind::ProbDivergence => "prob_divergence",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "reconstruction_error" => Ok(DetectorKind::ReconstructionError),
            "prob_divergence" => Ok(DetectorKind::ProbDivergence),
            other => Err(Error::Argument(format!("unknown detector {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnetConfig {
    pub detector: DetectorKind,
    pub target_fpr: f64,
    pub temperature: f64,
    /// When false the detector never rejects and only the reformer runs.
    pub use_detector: bool,
}

impl Default for MagnetConfig {
    fn default() -> Self {
        Self { detector: DetectorKind::ReconstructionError, target_fpr: 0.01, temperature: 10.0, use_detector: true }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Rejected,
    Classified(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DefenseVerdict {
    pub outcome: Outcome,
    pub score: f64,
    /// The reformer output that was classified.
    pub reformed: Option<Tensor<f32>>,
}

impl DefenseVerdict {
    pub fn label(&self) -> Option<usize> {
        match self.outcome {
            Outcome::Classified(l) => Some(l),
            Outcome::Rejected => None,
        }
    }

    pub fn is_rejected(&self) -> bool {
        self.outcome == Outcome::Rejected
    }
}

/// Calibrated detector and reformer in front of a classifier.
#[derive(Clone, Debug)]
pub struct MagnetDefense<'m> {
    reformer: &'m TrainedModel<f32>,
    classifier: &'m TrainedModel<f32>,
    detector: DetectorKind,
    temperature: f64,
    threshold: f64,
}

/// Jensen-Shannon divergence in nats.
pub fn jensen_shannon(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter().zip(m).filter(|(&x, _)| x > 0.0).map(|(&x, &y)| x * (x / y).ln()).sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    (0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0)
}

/// Nearest-rank `(1 - fpr)` quantile: the smallest score such that at most
/// `floor(fpr * n)` scores lie strictly above it.
pub fn quantile_threshold(scores: &[f64], target_fpr: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Argument("calibration needs at least one clean image".into()));
    }
    if !(0.0..=1.0).contains(&target_fpr) {
        return Err(Error::Argument(format!("target fpr {target_fpr} outside [0,1]")));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let rank = ((1.0 - target_fpr) * n as f64).ceil() as usize;
    Ok(s[rank.clamp(1, n) - 1])
}

impl<'m> MagnetDefense<'m> {
    /// Defense with an explicit threshold.
    pub fn with_threshold(
        reformer: &'m TrainedModel<f32>,
        classifier: &'m TrainedModel<f32>,
        cfg: &MagnetConfig,
        threshold: f64,
    ) -> Result<Self> {
        if reformer.spec().is_classifier() || !classifier.spec().is_classifier() {
            return Err(Error::Argument("magnet needs an autoencoder and a classifier".into()));
        }
        if reformer.spec().input_shape != classifier.spec().input_shape {
            return Err(Error::shape("reformer and classifier inputs differ"));
        }
        if !(cfg.temperature > 0.0 && cfg.temperature.is_finite()) {
            return Err(Error::Argument("temperature must be positive".into()));
        }
        let threshold = if cfg.use_detector { threshold } else { f64::INFINITY };
        Ok(Self { reformer, classifier, detector: cfg.detector, temperature: cfg.temperature, threshold })
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn detector(&self) -> DetectorKind {
        self.detector
    }

    /// Scores and reconstructions of a batch.
    fn score_batch(&self, images: &Tensor<f32>) -> Result<(Vec<f64>, Tensor<f32>)> {
        let batch = self.reformer.as_batch(images)?;
        let recon = self.reformer.reconstruct(&batch)?;
        let n = batch.batch_len();
        let m = batch.len() / n;
        let scores = match self.detector {
            DetectorKind::ReconstructionError => (0..n)
                .map(|i| {
                    let a = &batch.data()[i * m..(i + 1) * m];
                    let b = &recon.data()[i * m..(i + 1) * m];
                    let ss: f64 = a.iter().zip(b).map(|(&p, &q)| f64::from(p - q).powi(2)).sum();
                    ss.sqrt() / (m as f64).sqrt()
                })
                .collect(),
            DetectorKind::ProbDivergence => {
                let za = self.classifier.predict_logits_batch(&batch)?;
                let zb = self.classifier.predict_logits_batch(&recon)?;
                let t = self.temperature;
                let tempered = |z: &[f32]| softmax(&z.iter().map(|&v| f64::from(v) / t).collect::<Vec<_>>());
                za.data()
                    .chunks(10)
                    .zip(zb.data().chunks(10))
                    .map(|(a, b)| jensen_shannon(&tempered(a), &tempered(b)))
                    .collect()
            }
        };
        Ok((scores, recon))
    }

    pub fn detector_scores(&self, images: &Tensor<f32>) -> Result<Vec<f64>> {
        Ok(self.score_batch(images)?.0)
    }

    pub fn detector_score(&self, image: &Tensor<f32>) -> Result<f64> {
        let s = self.detector_scores(image)?;
        if s.len() != 1 {
            return Err(Error::shape("detector_score takes a single image"));
        }
        Ok(s[0])
    }

    /// Rejects above the threshold, otherwise classifies one reformer pass.
    pub fn predict_batch(&self, images: &Tensor<f32>) -> Result<Vec<DefenseVerdict>> {
        let (scores, recon) = self.score_batch(images)?;
        let probs = self.classifier.probabilities(&recon)?;
        Ok(scores
            .into_iter()
            .enumerate()
            .map(|(i, score)| {
                if score > self.threshold {
                    DefenseVerdict { outcome: Outcome::Rejected, score, reformed: None }
                } else {
                    let label = argmax(&probs.data()[i * 10..(i + 1) * 10]);
                    DefenseVerdict { outcome: Outcome::Classified(label), score, reformed: Some(recon.batch_item(i)) }
                }
            })
            .collect())
    }

    pub fn predict(&self, image: &Tensor<f32>) -> Result<DefenseVerdict> {
        let mut v = self.predict_batch(image)?;
        if v.len() != 1 {
            return Err(Error::shape("magnet_predict takes a single image"));
        }
        Ok(v.remove(0))
    }
}

/// Calibrates the detector threshold on clean `validation` images.
pub fn magnet_build<'m>(
    reformer: &'m TrainedModel<f32>,
    classifier: &'m TrainedModel<f32>,
    validation: &Tensor<f32>,
    cfg: &MagnetConfig,
) -> Result<MagnetDefense<'m>> {
    let uncalibrated = MagnetDefense::with_threshold(reformer, classifier, cfg, f64::INFINITY)?;
    if validation.is_empty() {
        return Err(Error::Argument("empty validation set".into()));
    }
    let scores = uncalibrated.detector_scores(validation)?;
    let threshold = quantile_threshold(&scores, cfg.target_fpr)?;
    MagnetDefense::with_threshold(reformer, classifier, cfg, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Dataset, ModelSpec};
    use proptest::prelude::*;

    #[test]
    fn jsd_extremes() {
        assert_eq!(jensen_shannon(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert!((jensen_shannon(&[1.0, 0.0], &[0.0, 1.0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn quantile_examples() {
        let scores: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        let t = quantile_threshold(&scores, 0.01).unwrap();
        assert_eq!(scores.iter().filter(|&&s| s > t).count(), 10);
        assert_eq!(quantile_threshold(&scores, 0.0).unwrap(), 999.0);
        assert!(quantile_threshold(&[], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn threshold_non_increasing_in_fpr(
            scores in proptest::collection::vec(0.0f64..10.0, 1..200),
            a in 0.0f64..1.0,
            b in 0.0f64..1.0,
        ) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(quantile_threshold(&scores, hi).unwrap() <= quantile_threshold(&scores, lo).unwrap());
            let t = quantile_threshold(&scores, lo).unwrap();
            let above = scores.iter().filter(|&&s| s > t).count();
            prop_assert!(above as f64 <= lo * scores.len() as f64 + 1e-9);
        }
    }

    fn models() -> (TrainedModel<f32>, TrainedModel<f32>, Tensor<f32>) {
        let ae = TrainedModel::init(ModelSpec::autoencoder(Dataset::Mnist), 1).unwrap();
        let clf = TrainedModel::init(ModelSpec::classifier(Dataset::Mnist), 2).unwrap();
        let x = Tensor::from_fn(&[20, 28, 28, 1], |i| ((i * 31) % 97) as f32 / 96.0);
        (ae, clf, x)
    }

    #[test]
    fn calibrated_defense_rejects_above_threshold_only() {
        let (ae, clf, x) = models();
        for detector in [DetectorKind::ReconstructionError, DetectorKind::ProbDivergence] {
            let cfg = MagnetConfig { detector, target_fpr: 0.1, ..MagnetConfig::default() };
            let d = magnet_build(&ae, &clf, &x, &cfg).unwrap();
            let again = magnet_build(&ae, &clf, &x, &cfg).unwrap();
            assert_eq!(d.threshold(), again.threshold());
            let verdicts = d.predict_batch(&x).unwrap();
            let rejected = verdicts.iter().filter(|v| v.is_rejected()).count();
            assert!(rejected <= 2);
            for (i, v) in verdicts.iter().enumerate() {
                assert_eq!(v.is_rejected(), v.score > d.threshold());
                assert!(v.score >= 0.0);
                if let Some(r) = &v.reformed {
                    assert_eq!(r, &ae.reconstruct(&x.batch_item(i)).unwrap());
                    assert_eq!(v.label(), Some(clf.predict_label(r).unwrap()));
                }
            }
        }
    }

    #[test]
    fn zero_fpr_keeps_every_clean_image() {
        let (ae, clf, x) = models();
        let cfg = MagnetConfig { target_fpr: 0.0, ..MagnetConfig::default() };
        let d = magnet_build(&ae, &clf, &x, &cfg).unwrap();
        assert!(d.predict_batch(&x).unwrap().iter().all(|v| !v.is_rejected()));
    }

    #[test]
    fn single_image_scores_and_rejection() {
        let (ae, clf, x) = models();
        let d = MagnetDefense::with_threshold(&ae, &clf, &MagnetConfig::default(), -1.0).unwrap();
        let v = d.predict(&x.batch_item(0)).unwrap();
        assert_eq!(v.outcome, Outcome::Rejected);
        assert_eq!(v.label(), None);
        assert!(v.reformed.is_none());
        let off = MagnetConfig { use_detector: false, ..MagnetConfig::default() };
        let d = MagnetDefense::with_threshold(&ae, &clf, &off, -1.0).unwrap();
        assert!(!d.predict(&x.batch_item(0)).unwrap().is_rejected());
        assert!(magnet_build(&ae, &clf, &Tensor::zeros(&[0]), &MagnetConfig::default()).is_err());
    }

    #[test]
    fn reconstruction_score_is_scaled_l2() {
        let (ae, clf, x) = models();
        let d = MagnetDefense::with_threshold(&ae, &clf, &MagnetConfig::default(), 1.0).unwrap();
        let r = ae.reconstruct(&x.batch_item(0)).unwrap();
        let s = d.detector_score(&r).unwrap();
        let direct = crate::attack::l2_distance(&ae.reconstruct(&r).unwrap(), &r).unwrap() / 28.0;
        assert!((s - direct).abs() < 1e-9);
    }
}
