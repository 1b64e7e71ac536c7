//! The two test-accuracy definitions.

use crate::defense::Outcome;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum InputKind {
    Original,
    Adversarial,
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::Argument("accuracy of an empty set".into()));
    }
    if a != b {
        return Err(Error::Argument(format!("{a} predictions for {b} labels")));
    }
    Ok(())
}

/// Fraction of predictions equal to their label.
pub fn test_accuracy_plain(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Defended accuracy: on adversarial inputs a rejection also counts as a
/// success; on original inputs it counts as a failure.
pub fn test_accuracy_defended(outcomes: &[Outcome], labels: &[usize], kind: InputKind) -> Result<f64> {
    check_lengths(outcomes.len(), labels.len())?;
    let ok = outcomes
        .iter()
        .zip(labels)
        .filter(|&(o, &l)| match o {
            Outcome::Classified(p) => *p == l,
            Outcome::Rejected => kind == InputKind::Adversarial,
        })
        .count();
    Ok(ok as f64 / labels.len() as f64)
}
