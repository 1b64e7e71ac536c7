//! Result table of an experiment and its renderings.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::attack::AttackKind;
use crate::error::{Error, Result};
use crate::model::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ExampleKind {
    Original,
    Carlini,
    ManiGen,
}

impl ExampleKind {
    pub const ALL: [ExampleKind; 3] = [ExampleKind::Original, ExampleKind::Carlini, ExampleKind::ManiGen];

    pub fn as_str(self) -> &'static str {
        match self {
            ExampleKind::Original => "original",
            ExampleKind::Carlini => "carlini",
            ExampleKind::ManiGen => "manigen",
        }
    }

    fn title(self) -> &'static str {
        match self {
            ExampleKind::Original => "Original",
            ExampleKind::Carlini => "Carlini",
            ExampleKind::ManiGen => "ManiGen",
        }
    }

    pub fn attack(self) -> Option<AttackKind> {
        match self {
            ExampleKind::Original => None,
            ExampleKind::Carlini => Some(AttackKind::Carlini),
            ExampleKind::ManiGen => Some(AttackKind::ManiGen),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassifierKind {
    Standalone,
    Magnet,
    AdvDef,
}

impl ClassifierKind {
    pub const ALL: [ClassifierKind; 3] = [ClassifierKind::Standalone, ClassifierKind::Magnet, ClassifierKind::AdvDef];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierKind::Standalone => "standalone",
            ClassifierKind::Magnet => "magnet",
            ClassifierKind::AdvDef => "advdef",
        }
    }

    fn title(self) -> &'static str {
        match self {
            ClassifierKind::Standalone => "Standalone",
            ClassifierKind::Magnet => "MagNet",
            ClassifierKind::AdvDef => "AdvDef",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub accuracy: f64,
    pub samples: usize,
    pub rejected: usize,
    /// Over all returned examples of an adversarial row.
    pub mean_distortion: Option<f64>,
    pub median_distortion: Option<f64>,
    /// Fraction of adversarial examples this classifier gets wrong.
    pub success_rate: Option<f64>,
    pub seconds: f64,
}

/// What an attack reported about its own run, independent of scoring.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackSummary {
    pub kind: AttackKind,
    pub reported_success: f64,
    pub logits_queries: u64,
    pub oracle_queries: u64,
    pub iterations_run: u64,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub dataset: Dataset,
    pub seed: u64,
    pub config_digest: String,
    /// Effective settings, recorded so every override is visible.
    pub settings: Vec<(String, String)>,
    pub magnet_threshold: f64,
    pub cells: BTreeMap<(ExampleKind, ClassifierKind), Cell>,
    pub attacks: Vec<AttackSummary>,
}

/// Mean and median of a non-empty slice.
pub fn mean_median(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 { s[n / 2] } else { (s[n / 2 - 1] + s[n / 2]) / 2.0 };
    Some((s.iter().sum::<f64>() / n as f64, median))
}

fn num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v:.6}")
    }
}

impl EvalReport {
    pub fn cell(&self, example: ExampleKind, classifier: ClassifierKind) -> Result<&Cell> {
        self.cells
            .get(&(example, classifier))
            .ok_or_else(|| Error::Argument(format!("no cell {}/{}", example.as_str(), classifier.as_str())))
    }

    pub fn attack(&self, kind: AttackKind) -> Option<&AttackSummary> {
        self.attacks.iter().find(|a| a.kind == kind)
    }

    /// Checks the report invariants: accuracies in [0,1], positive sample
    /// counts, and standalone success equal to one minus accuracy.
    pub fn validate(&self) -> Result<()> {
        for ((e, c), cell) in &self.cells {
            let at = format!("{}/{}", e.as_str(), c.as_str());
            if !(0.0..=1.0).contains(&cell.accuracy) {
                return Err(Error::Validation(format!("{at}: accuracy {}", cell.accuracy)));
            }
            if cell.samples == 0 {
                return Err(Error::Validation(format!("{at}: no samples")));
            }
            if let Some(s) = cell.success_rate {
                if *c == ClassifierKind::Standalone && s != 1.0 - cell.accuracy {
                    return Err(Error::Validation(format!("{at}: success {s} != 1 - accuracy {}", cell.accuracy)));
                }
            }
        }
        Ok(())
    }

    /// Flat `key=value` lines. Contains no timings, so equal inputs give
    /// equal bytes.
    pub fn render_machine(&self) -> String {
        let mut out = String::new();
        let mut line = |k: &str, v: &str| {
            let _ = writeln!(out, "{k}={v}");
        };
        line("dataset", self.dataset.as_str());
        line("seed", &self.seed.to_string());
        line("config_digest", &self.config_digest);
        for (k, v) in &self.settings {
            line(&format!("setting.{k}"), v);
        }
        line("magnet.threshold", &num(self.magnet_threshold));
        for a in &self.attacks {
            let p = format!("attack.{}", a.kind.as_str());
            line(&format!("{p}.reported_success"), &num(a.reported_success));
            line(&format!("{p}.logits_queries"), &a.logits_queries.to_string());
            line(&format!("{p}.oracle_queries"), &a.oracle_queries.to_string());
            line(&format!("{p}.iterations_run"), &a.iterations_run.to_string());
        }
        for ((e, c), cell) in &self.cells {
            let p = format!("cell.{}.{}", e.as_str(), c.as_str());
            line(&format!("{p}.accuracy"), &num(cell.accuracy));
            line(&format!("{p}.samples"), &cell.samples.to_string());
            line(&format!("{p}.rejected"), &cell.rejected.to_string());
            if let Some(v) = cell.success_rate {
                line(&format!("{p}.success_rate"), &num(v));
            }
            if let Some(v) = cell.mean_distortion {
                line(&format!("{p}.mean_distortion"), &num(v));
            }
            if let Some(v) = cell.median_distortion {
                line(&format!("{p}.median_distortion"), &num(v));
            }
            line(&format!("{p}.config_digest"), &self.config_digest);
        }
        out
    }

    /// Accuracy table with example kinds as rows and classifiers as columns.
    pub fn render_table(&self) -> String {
        let samples = self.cells.values().map(|c| c.samples).max().unwrap_or(0);
        let mut out = format!(
            "Summary of Test Accuracy ({}, {} samples, seed {}, config {})\n",
            self.dataset, samples, self.seed, self.config_digest
        );
        let _ = write!(out, "{:<10}", "");
        for c in ClassifierKind::ALL {
            let _ = write!(out, "{:>12}", c.title());
        }
        let _ = writeln!(out, "{:>16}", "mean L2");
        for e in ExampleKind::ALL {
            let _ = write!(out, "{:<10}", e.title());
            for c in ClassifierKind::ALL {
                match self.cells.get(&(e, c)) {
                    Some(cell) => {
                        let _ = write!(out, "{:>11.1}%", cell.accuracy * 100.0);
                    }
                    None => {
                        let _ = write!(out, "{:>12}", "-");
                    }
                }
            }
            match self.cells.get(&(e, ClassifierKind::Standalone)).and_then(|c| c.mean_distortion) {
                Some(d) => {
                    let _ = writeln!(out, "{d:>16.4}");
                }
                None => {
                    let _ = writeln!(out, "{:>16}", "-");
                }
            }
        }
        out
    }

    /// Wall-clock timings, kept apart from the deterministic report.
    pub fn render_timings(&self) -> String {
        let mut out = String::new();
        for a in &self.attacks {
            let _ = writeln!(out, "attack.{}.seconds={:.3}", a.kind.as_str(), a.seconds);
        }
        for ((e, c), cell) in &self.cells {
            let _ = writeln!(out, "cell.{}.{}.seconds={:.3}", e.as_str(), c.as_str(), cell.seconds);
        }
        out
    }
}
