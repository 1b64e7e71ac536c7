//! Run configuration and its `key = value` file dialect.
//!
//! One setting per line, `#` starts a comment, keys are dotted
//! (`attack.manigen.c = 1.0`). Unknown keys are rejected.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attack::{AttackConfig, AttackKind};
use crate::autodiff::{LossKind, OptimizerKind};
use crate::defense::{AdvTrainRecipe, DetectorKind, MagnetConfig};
use crate::error::{Error, Result};
use crate::model::{Augmentation, Dataset, TrainConfig};

/// `(key, value, line)` triples in file order.
pub fn parse_config(text: &str) -> Result<Vec<(String, String, usize)>> {
    let mut out: Vec<(String, String, usize)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("line {line_no}: expected `key = value`, got {raw:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let valid = !k.is_empty()
            && k.split('.').all(|p| !p.is_empty() && p.chars().all(|c| c.is_ascii_alphanumeric() || c == '_'));
        if !valid {
            return Err(Error::Validation(format!("line {line_no}: malformed key {k:?}")));
        }
        if let Some((_, _, first)) = out.iter().find(|(key, _, _)| key == k) {
            return Err(Error::Validation(format!("line {line_no}: key {k} already set on line {first}")));
        }
        out.push((k.to_string(), v.to_string(), line_no));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelPaths {
    pub autoencoder: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
    pub advdef: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    /// Reshuffle train and test together instead of the official split.
    pub resplit: bool,
    pub samples: usize,
    /// Draw samples only among test images the standalone model gets right.
    pub correct_only: bool,
    pub grid_count: usize,
    pub models: ModelPaths,
    /// Train missing models instead of failing validation.
    pub train: bool,
    /// Training examples for the classifiers; 0 means the whole split.
    pub clf_subset: usize,
    pub ae_subset: usize,
    pub train_ae: TrainConfig,
    pub train_clf: TrainConfig,
    pub train_advdef: TrainConfig,
    pub advdef: AdvTrainRecipe,
    pub manigen: AttackConfig,
    pub carlini: AttackConfig,
    pub fgsm: AttackConfig,
    pub bim: AttackConfig,
    pub magnet: MagnetConfig,
    /// Clean training images used to calibrate the detector.
    pub magnet_validation: usize,
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Validation(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Validation(format!("{key}: expected true/false, got {v:?}"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn path_opt(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn loss_str(l: LossKind) -> &'static str {
    match l {
        LossKind::Bce => "bce",
        LossKind::Mse => "mse",
        LossKind::CrossEntropy => "cross_entropy",
    }
}

fn parse_loss(key: &str, v: &str) -> Result<LossKind> {
    match v {
        "bce" => Ok(LossKind::Bce),
        "mse" => Ok(LossKind::Mse),
        "cross_entropy" => Ok(LossKind::CrossEntropy),
        _ => Err(Error::Validation(format!("{key}: unknown loss {v:?}"))),
    }
}

fn set_train(t: &mut TrainConfig, key: &str, field: &str, v: &str) -> Result<bool> {
    match field {
        "optimizer" => {
            t.optimizer = OptimizerKind::parse(v).ok_or_else(|| Error::Validation(format!("{key}: unknown optimizer {v:?}")))?
        }
        "learning_rate" => t.learning_rate = parse(key, v)?,
        "loss" => t.loss = parse_loss(key, v)?,
        "batch_size" => t.batch_size = parse(key, v)?,
        "shuffle" => t.shuffle = parse_bool(key, v)?,
        "epochs" => t.epochs = parse(key, v)?,
        "augmentation" => {
            t.augmentation =
                Augmentation::parse(v).ok_or_else(|| Error::Validation(format!("{key}: unknown augmentation {v:?}")))?
        }
        _ => return Ok(false),
    }
    Ok(true)
}

fn train_entries(prefix: &str, t: &TrainConfig, out: &mut Vec<(String, String)>) {
    out.push((format!("{prefix}.optimizer"), t.optimizer.as_str().into()));
    out.push((format!("{prefix}.learning_rate"), t.learning_rate.to_string()));
    out.push((format!("{prefix}.loss"), loss_str(t.loss).into()));
    out.push((format!("{prefix}.batch_size"), t.batch_size.to_string()));
    out.push((format!("{prefix}.shuffle"), t.shuffle.to_string()));
    out.push((format!("{prefix}.epochs"), t.epochs.to_string()));
    out.push((format!("{prefix}.augmentation"), t.augmentation.as_str().into()));
}

fn set_attack(a: &mut AttackConfig, key: &str, field: &str, v: &str) -> Result<bool> {
    match (a.kind, field) {
        (AttackKind::ManiGen | AttackKind::Carlini, "c") => a.c = parse(key, v)?,
        (AttackKind::ManiGen | AttackKind::Carlini, "c_sweep") => a.c_sweep = parse_list(key, v)?,
        (AttackKind::ManiGen | AttackKind::Carlini, "iterations") => a.iterations = parse(key, v)?,
        (AttackKind::ManiGen | AttackKind::Carlini, "learning_rate") => a.learning_rate = parse(key, v)?,
        (AttackKind::ManiGen, "check_period") => a.check_period = parse(key, v)?,
        (AttackKind::Fgsm | AttackKind::Bim, "epsilon") => a.epsilon = parse(key, v)?,
        (AttackKind::Bim, "alpha") => a.alpha = parse(key, v)?,
        (AttackKind::Bim, "steps") => a.steps = parse(key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

fn attack_entries(a: &AttackConfig, out: &mut Vec<(String, String)>) {
    let p = format!("attack.{}", a.kind.as_str());
    match a.kind {
        AttackKind::ManiGen | AttackKind::ManiGenEncoder | AttackKind::Carlini => {
            out.push((format!("{p}.c"), a.c.to_string()));
            let sweep: Vec<String> = a.c_sweep.iter().map(f64::to_string).collect();
            out.push((format!("{p}.c_sweep"), sweep.join(",")));
            out.push((format!("{p}.iterations"), a.iterations.to_string()));
            out.push((format!("{p}.learning_rate"), a.learning_rate.to_string()));
            if a.kind != AttackKind::Carlini {
                out.push((format!("{p}.check_period"), a.check_period.to_string()));
            }
        }
        AttackKind::Fgsm => out.push((format!("{p}.epsilon"), a.epsilon.to_string())),
        AttackKind::Bim => {
            out.push((format!("{p}.epsilon"), a.epsilon.to_string()));
            out.push((format!("{p}.alpha"), a.alpha.to_string()));
            out.push((format!("{p}.steps"), a.steps.to_string()));
        }
    }
}

impl RunConfig {
    /// Full-scale defaults for `dataset`.
    pub fn new(dataset: Dataset) -> Self {
        let mut fgsm = AttackConfig::new(AttackKind::Fgsm);
        let mut bim = AttackConfig::new(AttackKind::Bim);
        let advdef = AdvTrainRecipe::for_dataset(dataset);
        fgsm.epsilon = advdef.epsilon;
        bim.epsilon = advdef.epsilon;
        bim.alpha = advdef.epsilon / 5.0;
        Self {
            dataset,
            data_dir: PathBuf::from("data").join(dataset.as_str()),
            out_dir: PathBuf::from("runs").join(dataset.as_str()),
            seed: 0,
            resplit: false,
            samples: 384,
            correct_only: false,
            grid_count: 10,
            models: ModelPaths::default(),
            train: true,
            clf_subset: 0,
            ae_subset: 0,
            train_ae: TrainConfig::autoencoder(dataset),
            train_clf: TrainConfig::classifier(dataset),
            train_advdef: TrainConfig::classifier(dataset),
            advdef,
            manigen: AttackConfig::new(AttackKind::ManiGen),
            carlini: AttackConfig::new(AttackKind::Carlini),
            fgsm,
            bim,
            magnet: MagnetConfig::default(),
            magnet_validation: 1000,
        }
    }

    /// Defaults for the dataset named in `entries` (mnist if absent), then
    /// every entry applied in order.
    pub fn from_entries(entries: &[(String, String, usize)]) -> Result<Self> {
        let dataset = match entries.iter().find(|(k, _, _)| k == "dataset") {
            Some((_, v, _)) => Dataset::parse(v).map_err(|e| Error::Validation(e.to_string()))?,
            None => Dataset::Mnist,
        };
        let mut cfg = Self::new(dataset);
        for (k, v, line) in entries {
            cfg.set(k, v).map_err(|e| match e {
                Error::Validation(m) => Error::Validation(format!("line {line}: {m}")),
                other => other,
            })?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_entries(&parse_config(text)?)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    /// Applies one setting; unknown keys are a validation error naming the key.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let unknown = || Error::Validation(format!("unknown config key {key:?}"));
        let parts: Vec<&str> = key.split('.').collect();
        match parts[..] {
            ["dataset"] => {
                let d = Dataset::parse(v).map_err(|e| Error::Validation(e.to_string()))?;
                if d != self.dataset {
                    return Err(Error::Validation(format!("dataset {d} conflicts with {}", self.dataset)));
                }
            }
            ["data_dir"] => self.data_dir = PathBuf::from(v),
            ["out_dir"] => self.out_dir = PathBuf::from(v),
            ["seed"] => self.seed = parse(key, v)?,
            ["resplit"] => self.resplit = parse_bool(key, v)?,
            ["samples"] => self.samples = parse(key, v)?,
            ["correct_only"] => self.correct_only = parse_bool(key, v)?,
            ["grid_count"] => self.grid_count = parse(key, v)?,
            ["models", "autoencoder"] => self.models.autoencoder = path_opt(v),
            ["models", "classifier"] => self.models.classifier = path_opt(v),
            ["models", "advdef"] => self.models.advdef = path_opt(v),
            ["train", "enabled"] => self.train = parse_bool(key, v)?,
            ["train", "clf_subset"] => self.clf_subset = parse(key, v)?,
            ["train", "ae_subset"] => self.ae_subset = parse(key, v)?,
            ["train", "ae", f] => {
                if !set_train(&mut self.train_ae, key, f, v)? {
                    return Err(unknown());
                }
            }
            ["train", "clf", f] => {
                if !set_train(&mut self.train_clf, key, f, v)? {
                    return Err(unknown());
                }
            }
            ["train", "advdef", f] => {
                if !set_train(&mut self.train_advdef, key, f, v)? {
                    return Err(unknown());
                }
            }
            ["advdef", "epsilon"] => self.advdef.epsilon = parse(key, v)?,
            ["attack", kind, f] => {
                let a = match kind {
                    "manigen" => &mut self.manigen,
                    "carlini" => &mut self.carlini,
                    "fgsm" => &mut self.fgsm,
                    "bim" => &mut self.bim,
                    _ => return Err(unknown()),
                };
                if !set_attack(a, key, f, v)? {
                    return Err(unknown());
                }
            }
            ["magnet", "detector"] => {
                self.magnet.detector = DetectorKind::parse(v).map_err(|e| Error::Validation(e.to_string()))?
            }
            ["magnet", "target_fpr"] => self.magnet.target_fpr = parse(key, v)?,
            ["magnet", "temperature"] => self.magnet.temperature = parse(key, v)?,
            ["magnet", "use_detector"] => self.magnet.use_detector = parse_bool(key, v)?,
            ["magnet", "validation"] => self.magnet_validation = parse(key, v)?,
            _ => return Err(unknown()),
        }
        Ok(())
    }

    /// Every setting as `(key, value)`, in a fixed order. Output paths are
    /// excluded so relocating a run does not change its digest.
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out: Vec<(String, String)> = vec![
            ("dataset".into(), self.dataset.as_str().into()),
            ("seed".into(), self.seed.to_string()),
            ("resplit".into(), self.resplit.to_string()),
            ("samples".into(), self.samples.to_string()),
            ("correct_only".into(), self.correct_only.to_string()),
            ("grid_count".into(), self.grid_count.to_string()),
            ("train.enabled".into(), self.train.to_string()),
            ("train.clf_subset".into(), self.clf_subset.to_string()),
            ("train.ae_subset".into(), self.ae_subset.to_string()),
        ];
        train_entries("train.ae", &self.train_ae, &mut out);
        train_entries("train.clf", &self.train_clf, &mut out);
        train_entries("train.advdef", &self.train_advdef, &mut out);
        out.push(("advdef.epsilon".into(), self.advdef.epsilon.to_string()));
        for a in [&self.manigen, &self.carlini, &self.fgsm, &self.bim] {
            attack_entries(a, &mut out);
        }
        out.push(("magnet.detector".into(), self.magnet.detector.as_str().into()));
        out.push(("magnet.target_fpr".into(), self.magnet.target_fpr.to_string()));
        out.push(("magnet.temperature".into(), self.magnet.temperature.to_string()));
        out.push(("magnet.use_detector".into(), self.magnet.use_detector.to_string()));
        out.push(("magnet.validation".into(), self.magnet_validation.to_string()));
        out
    }

    /// Paths, rendered separately from [`RunConfig::entries`].
    pub fn path_entries(&self) -> Vec<(String, String)> {
        vec![
            ("data_dir".into(), self.data_dir.display().to_string()),
            ("out_dir".into(), self.out_dir.display().to_string()),
            ("models.autoencoder".into(), show_path(&self.models.autoencoder)),
            ("models.classifier".into(), show_path(&self.models.classifier)),
            ("models.advdef".into(), show_path(&self.models.advdef)),
        ]
    }

    /// First 16 hex digits of the SHA-256 of the rendered settings.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Training configs with seeds derived from the run seed.
    pub fn seeded_train_configs(&self) -> (TrainConfig, TrainConfig, TrainConfig) {
        let s = self.seed;
        (
            TrainConfig { seed: s.wrapping_mul(3).wrapping_add(1), ..self.train_ae.clone() },
            TrainConfig { seed: s.wrapping_mul(3).wrapping_add(2), ..self.train_clf.clone() },
            TrainConfig { seed: s.wrapping_mul(3).wrapping_add(3), ..self.train_advdef.clone() },
        )
    }

    /// Checks values and that every referenced input exists. Runs before any
    /// computation.
    pub fn validate(&self) -> Result<()> {
        let v = |m: String| Err(Error::Validation(m));
        if self.samples == 0 {
            return v("samples must be positive".into());
        }
        for a in [&self.manigen, &self.carlini, &self.fgsm, &self.bim] {
            a.validate().map_err(|e| Error::Validation(format!("attack.{}: {e}", a.kind.as_str())))?;
        }
        for (name, t) in [("ae", &self.train_ae), ("clf", &self.train_clf), ("advdef", &self.train_advdef)] {
            t.validate().map_err(|e| Error::Validation(format!("train.{name}: {e}")))?;
        }
        if !(0.0..=1.0).contains(&self.magnet.target_fpr) {
            return v(format!("magnet.target_fpr {} outside [0,1]", self.magnet.target_fpr));
        }
        if !(self.advdef.epsilon > 0.0 && self.advdef.epsilon < 1.0) {
            return v(format!("advdef.epsilon {} outside (0,1)", self.advdef.epsilon));
        }
        if self.magnet_validation == 0 {
            return v("magnet.validation must be positive".into());
        }
        let files = crate::data::DatasetSplit::required_files(self.dataset, &self.data_dir);
        if let Some(missing) = files.iter().find(|p| !p.is_file()) {
            return v(format!("data file {} does not exist", missing.display()));
        }
        for (key, p) in [
            ("models.autoencoder", &self.models.autoencoder),
            ("models.classifier", &self.models.classifier),
            ("models.advdef", &self.models.advdef),
        ] {
            match p {
                Some(p) if !p.is_file() => return v(format!("{key}: {} does not exist", p.display())),
                None if !self.train => return v(format!("{key} is not set and training is disabled")),
                _ => {}
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_dotted_keys() {
        let e = parse_config("# header\nseed = 7  # inline\n\nattack.manigen.c = 2.5\n").unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!((e[1].0.as_str(), e[1].1.as_str(), e[1].2), ("attack.manigen.c", "2.5", 4));
        let cfg = RunConfig::from_entries(&e).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.manigen.c, 2.5);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = RunConfig::from_text("attack.manigen.cc = 1.0\n").unwrap_err();
        assert!(matches!(&err, Error::Validation(m) if m.contains("attack.manigen.cc") && m.contains("line 1")), "{err}");
        assert!(RunConfig::from_text("attack.fgsm.alpha = 0.1").is_err());
        assert!(RunConfig::from_text("not a setting").is_err());
        assert!(RunConfig::from_text("seed = 1\nseed = 2").is_err());
    }

    #[test]
    fn rendered_entries_parse_back() {
        let mut cfg = RunConfig::new(Dataset::Mnist);
        cfg.seed = 11;
        cfg.manigen.c_sweep = vec![0.1, 1.0, 10.0];
        cfg.train_ae.epochs = 3;
        cfg.models.classifier = Some(PathBuf::from("m/clf.mgwt"));
        let text: String = cfg
            .entries()
            .into_iter()
            .chain(cfg.path_entries())
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn digest_tracks_settings_not_paths() {
        let a = RunConfig::new(Dataset::Mnist);
        let mut b = a.clone();
        b.out_dir = PathBuf::from("elsewhere");
        assert_eq!(a.digest(), b.digest());
        b.seed = 1;
        assert_ne!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 16);
    }

    #[test]
    fn validation_checks_paths_before_compute() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::new(Dataset::Mnist);
        cfg.data_dir = dir.path().to_path_buf();
        assert!(matches!(cfg.validate(), Err(Error::Validation(m)) if m.contains("data file")));
        for f in crate::data::DatasetSplit::required_files(Dataset::Mnist, dir.path()) {
            std::fs::write(f, b"").unwrap();
        }
        cfg.validate().unwrap();
        cfg.train = false;
        assert!(matches!(cfg.validate(), Err(Error::Validation(m)) if m.contains("models.autoencoder")));
        cfg.models.autoencoder = Some(dir.path().join("nope.mgwt"));
        assert!(matches!(cfg.validate(), Err(Error::Validation(m)) if m.contains("nope.mgwt")));
    }

    #[test]
    fn cifar_defaults_follow_dataset() {
        let cfg = RunConfig::from_text("dataset = cifar10").unwrap();
        assert_eq!(cfg.advdef.epsilon, 0.03);
        assert_eq!(cfg.train_clf.optimizer, OptimizerKind::Sgd);
        assert_eq!(cfg.train_ae.loss, LossKind::Mse);
    }
}
