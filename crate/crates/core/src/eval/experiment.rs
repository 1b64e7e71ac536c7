//! The attack x defense grid.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;

use super::accuracy::{test_accuracy_defended, test_accuracy_plain, InputKind};
use super::config::RunConfig;
use super::report::{mean_median, AttackSummary, Cell, ClassifierKind, EvalReport, ExampleKind};
use crate::attack::{
    bim, carlini_attack, fgsm, manigen_attack, manigen_encoder_variant, AdvResult, AttackConfig, AttackKind,
};
use crate::autodiff::Tensor;
use crate::data::{export_grid, load_weights, save_weights, seeded_subset, stratified_sample, DatasetSplit};
use crate::defense::{adversarial_training, magnet_build, MagnetDefense, Outcome};
use crate::error::{Error, Result};
use crate::model::{train, LabelOracle, ModelSpec, TrainedModel};

/// Seed offsets keep the independent random streams of a run apart.
const SUBSET_STREAM: u64 = 0x5b5e_7000;
const MAGNET_STREAM: u64 = 0x3a63_e700;

pub struct Models {
    pub autoencoder: TrainedModel<f32>,
    pub classifier: TrainedModel<f32>,
    pub advdef: TrainedModel<f32>,
}

/// Loads the configured split, reshuffled when `resplit` is set.
pub fn load_data(cfg: &RunConfig) -> Result<DatasetSplit> {
    let data = DatasetSplit::load(cfg.dataset, &cfg.data_dir)?;
    if cfg.resplit {
        data.resplit(cfg.seed)
    } else {
        Ok(data)
    }
}

fn subset(data: &DatasetSplit, count: usize, seed: u64) -> (Tensor<f32>, Vec<u8>) {
    if count == 0 {
        (data.train_images.clone(), data.train_labels.clone())
    } else {
        data.train_subset(count, seed ^ SUBSET_STREAM)
    }
}

pub fn train_autoencoder(cfg: &RunConfig, data: &DatasetSplit) -> Result<TrainedModel<f32>> {
    let (tc, _, _) = cfg.seeded_train_configs();
    let (images, _) = subset(data, cfg.ae_subset, cfg.seed.wrapping_add(1));
    log::info!("training autoencoder on {} images for {} epochs", images.batch_len(), tc.epochs);
    train(ModelSpec::autoencoder(cfg.dataset), &images, None, &tc)
}

pub fn train_classifier(cfg: &RunConfig, data: &DatasetSplit) -> Result<TrainedModel<f32>> {
    let (_, tc, _) = cfg.seeded_train_configs();
    let (images, labels) = subset(data, cfg.clf_subset, cfg.seed);
    log::info!("training classifier on {} images for {} epochs", images.batch_len(), tc.epochs);
    train(ModelSpec::classifier(cfg.dataset), &images, Some(&labels), &tc)
}

pub fn train_advdef(cfg: &RunConfig, data: &DatasetSplit) -> Result<TrainedModel<f32>> {
    let (_, _, tc) = cfg.seeded_train_configs();
    let (images, labels) = subset(data, cfg.clf_subset, cfg.seed);
    log::info!(
        "adversarially training classifier on {} images for {} epochs (eps {})",
        images.batch_len(),
        tc.epochs,
        cfg.advdef.epsilon
    );
    adversarial_training(ModelSpec::classifier(cfg.dataset), &images, &labels, cfg.advdef, &tc)
}

/// Loads a configured model, or trains it and saves it under
/// `<out_dir>/models/<name>.mgwt`.
fn obtain(
    cfg: &RunConfig,
    configured: &Option<PathBuf>,
    spec: ModelSpec,
    name: &str,
    fit: impl FnOnce() -> Result<TrainedModel<f32>>,
) -> Result<TrainedModel<f32>> {
    if let Some(p) = configured {
        log::info!("loading {name} from {}", p.display());
        return load_weights(&spec, p);
    }
    if !cfg.train {
        return Err(Error::Validation(format!("models.{name} is not set and training is disabled")));
    }
    let model = fit()?;
    let path = cfg.out_dir.join("models").join(format!("{name}.mgwt"));
    save_weights(&model, &path)?;
    log::info!("saved {name} to {}", path.display());
    Ok(model)
}

pub fn obtain_models(cfg: &RunConfig, data: &DatasetSplit) -> Result<Models> {
    let ds = cfg.dataset;
    Ok(Models {
        autoencoder: obtain(cfg, &cfg.models.autoencoder, ModelSpec::autoencoder(ds), "autoencoder", || {
            train_autoencoder(cfg, data)
        })?,
        classifier: obtain(cfg, &cfg.models.classifier, ModelSpec::classifier(ds), "classifier", || {
            train_classifier(cfg, data)
        })?,
        advdef: obtain(cfg, &cfg.models.advdef, ModelSpec::classifier(ds), "advdef", || train_advdef(cfg, data))?,
    })
}

/// Detector calibrated on clean training images.
pub fn calibrate_magnet<'m>(cfg: &RunConfig, data: &DatasetSplit, models: &'m Models) -> Result<MagnetDefense<'m>> {
    let idx = seeded_subset(data.train_labels.len(), cfg.magnet_validation, cfg.seed ^ MAGNET_STREAM);
    magnet_build(&models.autoencoder, &models.classifier, &data.train_images.select(&idx), &cfg.magnet)
}

/// Test indices to attack, stratified by class.
pub fn select_samples(cfg: &RunConfig, data: &DatasetSplit, classifier: &TrainedModel<f32>) -> Result<Vec<usize>> {
    let labels = &data.test_labels;
    let idx = if cfg.correct_only {
        let preds = classifier.predict_labels(&data.test_images)?;
        stratified_sample(labels, cfg.samples, cfg.seed, |i| preds[i] == labels[i] as usize)
    } else {
        stratified_sample(labels, cfg.samples, cfg.seed, |_| true)
    };
    if idx.is_empty() {
        return Err(Error::Validation("no eligible test images to sample".into()));
    }
    Ok(idx)
}

/// Attack settings of `kind` from the run config.
pub fn attack_config(cfg: &RunConfig, kind: AttackKind) -> AttackConfig {
    match kind {
        AttackKind::ManiGen => cfg.manigen.clone(),
        AttackKind::ManiGenEncoder => AttackConfig { kind, ..cfg.manigen.clone() },
        AttackKind::Carlini => cfg.carlini.clone(),
        AttackKind::Fgsm => cfg.fgsm.clone(),
        AttackKind::Bim => cfg.bim.clone(),
    }
}

fn gradient_sign_result(x: &Tensor<f32>, adv: Tensor<f32>, label: usize, clf: &TrainedModel<f32>) -> Result<AdvResult<f32>> {
    let predicted = clf.predict_label(&adv)?;
    let distortion = crate::attack::l2_distance(&adv, x)?;
    Ok(AdvResult {
        adversarial: adv,
        success: predicted != label,
        predicted: Some(predicted),
        distortion,
        iteration: 0,
        iterations_run: 0,
        oracle_queries: 0,
        c: 0.0,
        checked: Vec::new(),
    })
}

/// Runs `kind` on every image, in parallel, returning results in input order.
pub fn generate(
    kind: AttackKind,
    cfg: &AttackConfig,
    images: &[Tensor<f32>],
    labels: &[usize],
    models: &Models,
) -> Result<Vec<AdvResult<f32>>> {
    let oracle = LabelOracle::new(&models.classifier)?;
    let clf = &models.classifier;
    let ae = &models.autoencoder;
    images
        .par_iter()
        .zip(labels.par_iter())
        .map(|(x, &t)| match kind {
            AttackKind::ManiGen => manigen_attack(x, t, &oracle, ae, cfg),
            AttackKind::ManiGenEncoder => manigen_encoder_variant(x, t, &oracle, ae, cfg),
            AttackKind::Carlini => carlini_attack(x, t, clf, cfg),
            AttackKind::Fgsm => gradient_sign_result(x, fgsm(x, t, clf, cfg.epsilon)?, t, clf),
            AttackKind::Bim => gradient_sign_result(x, bim(x, t, clf, cfg.epsilon, cfg.alpha, cfg.steps)?, t, clf),
        })
        .collect()
}

struct Scored {
    cells: Vec<(ClassifierKind, Cell)>,
    standalone: Vec<usize>,
    magnet: Vec<Outcome>,
    advdef: Vec<usize>,
}

fn score(
    images: &Tensor<f32>,
    labels: &[usize],
    kind: InputKind,
    distortions: Option<&[f64]>,
    models: &Models,
    magnet: &MagnetDefense<'_>,
) -> Result<Scored> {
    let dist = distortions.and_then(mean_median);
    let cell = |accuracy: f64, rejected: usize, seconds: f64| Cell {
        accuracy,
        samples: labels.len(),
        rejected,
        mean_distortion: dist.map(|d| d.0),
        median_distortion: dist.map(|d| d.1),
        success_rate: distortions.map(|_| 1.0 - accuracy),
        seconds,
    };
    let t = Instant::now();
    let standalone = models.classifier.predict_labels(images)?;
    let standalone_cell = cell(test_accuracy_plain(&standalone, labels)?, 0, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let magnet_out: Vec<Outcome> = magnet.predict_batch(images)?.into_iter().map(|v| v.outcome).collect();
    let rejected = magnet_out.iter().filter(|o| **o == Outcome::Rejected).count();
    let magnet_cell = cell(test_accuracy_defended(&magnet_out, labels, kind)?, rejected, t.elapsed().as_secs_f64());
    let t = Instant::now();
    let advdef = models.advdef.predict_labels(images)?;
    let advdef_cell = cell(test_accuracy_plain(&advdef, labels)?, 0, t.elapsed().as_secs_f64());
    Ok(Scored {
        cells: vec![
            (ClassifierKind::Standalone, standalone_cell),
            (ClassifierKind::Magnet, magnet_cell),
            (ClassifierKind::AdvDef, advdef_cell),
        ],
        standalone,
        magnet: magnet_out,
        advdef,
    })
}

fn outcome_str(o: &Outcome) -> String {
    match o {
        Outcome::Rejected => "R".into(),
        Outcome::Classified(l) => l.to_string(),
    }
}

/// Everything an evaluation produced, before it is written out.
pub struct Experiment {
    pub report: EvalReport,
    pub sample_indices: Vec<usize>,
    pub labels: Vec<usize>,
    pub carlini: Vec<AdvResult<f32>>,
    pub manigen: Vec<AdvResult<f32>>,
    examples_tsv: String,
    grid: Vec<Vec<Tensor<f32>>>,
}

impl Experiment {
    pub fn examples_tsv(&self) -> &str {
        &self.examples_tsv
    }

    /// Originals, Carlini and ManiGen examples of the first samples, one row each.
    pub fn write_grid(&self, path: &Path) -> Result<()> {
        export_grid(&self.grid, path)
    }

    /// Writes `report.txt`, `table.txt`, `examples.tsv`, `grid.png` and
    /// `timings.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("report.txt"), self.report.render_machine())?;
        std::fs::write(dir.join("table.txt"), self.report.render_table())?;
        std::fs::write(dir.join("examples.tsv"), &self.examples_tsv)?;
        std::fs::write(dir.join("timings.txt"), self.report.render_timings())?;
        self.write_grid(&dir.join("grid.png"))
    }
}

/// Runs the grid with already obtained models.
pub fn run_with_models(cfg: &RunConfig, data: &DatasetSplit, models: &Models) -> Result<Experiment> {
    let magnet = calibrate_magnet(cfg, data, models)?;
    log::info!("magnet threshold {:.6} ({})", magnet.threshold(), magnet.detector().as_str());
    let idx = select_samples(cfg, data, &models.classifier)?;
    let images: Vec<Tensor<f32>> = idx.iter().map(|&i| data.test_images.batch_item(i)).collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.test_labels[i] as usize).collect();

    let mut attacks = Vec::new();
    let mut results = BTreeMap::new();
    // One attack at a time so the logits counter isolates each of them.
    for kind in [AttackKind::Carlini, AttackKind::ManiGen] {
        let acfg = attack_config(cfg, kind);
        log::info!("running {} on {} images", kind.as_str(), images.len());
        let before = models.classifier.logits_queries();
        let t = Instant::now();
        let res = generate(kind, &acfg, &images, &labels, models)?;
        let seconds = t.elapsed().as_secs_f64();
        let successes = res.iter().filter(|r| r.success).count();
        attacks.push(AttackSummary {
            kind,
            reported_success: successes as f64 / res.len() as f64,
            logits_queries: models.classifier.logits_queries() - before,
            oracle_queries: res.iter().map(|r| r.oracle_queries).sum(),
            iterations_run: res.iter().map(|r| r.iterations_run as u64).sum(),
            seconds,
        });
        results.insert(kind.as_str(), res);
    }
    let carlini = results.remove("carlini").expect("ran");
    let manigen = results.remove("manigen").expect("ran");

    let mut cells = BTreeMap::new();
    let mut per_row = Vec::new();
    for row in ExampleKind::ALL {
        let (batch, kind, dist) = match row {
            ExampleKind::Original => (Tensor::stack(&images)?, InputKind::Original, None),
            ExampleKind::Carlini | ExampleKind::ManiGen => {
                let res = if row == ExampleKind::Carlini { &carlini } else { &manigen };
                let advs: Vec<Tensor<f32>> = res.iter().map(|r| r.adversarial.clone()).collect();
                let d: Vec<f64> = res.iter().map(|r| r.distortion).collect();
                (Tensor::stack(&advs)?, InputKind::Adversarial, Some(d))
            }
        };
        let scored = score(&batch, &labels, kind, dist.as_deref(), models, &magnet)?;
        for (c, cell) in scored.cells.iter().cloned() {
            cells.insert((row, c), cell);
        }
        per_row.push(scored);
    }

    let report = EvalReport {
        dataset: cfg.dataset,
        seed: cfg.seed,
        config_digest: cfg.digest(),
        settings: cfg.entries(),
        magnet_threshold: magnet.threshold(),
        cells,
        attacks,
    };
    report.validate()?;

    let mut tsv = String::from("sample\ttest_index\tlabel");
    for row in ExampleKind::ALL {
        let p = row.as_str();
        if row != ExampleKind::Original {
            let _ = write!(tsv, "\t{p}_success\t{p}_distortion");
        }
        let _ = write!(tsv, "\t{p}_standalone\t{p}_magnet\t{p}_advdef");
    }
    tsv.push('\n');
    for (k, (&i, &l)) in idx.iter().zip(&labels).enumerate() {
        let _ = write!(tsv, "{k}\t{i}\t{l}");
        for (row, s) in ExampleKind::ALL.iter().zip(&per_row) {
            let res = match row {
                ExampleKind::Original => None,
                ExampleKind::Carlini => Some(&carlini[k]),
                ExampleKind::ManiGen => Some(&manigen[k]),
            };
            if let Some(r) = res {
                let _ = write!(tsv, "\t{}\t{:.6}", u8::from(r.success), r.distortion);
            }
            let _ = write!(tsv, "\t{}\t{}\t{}", s.standalone[k], outcome_str(&s.magnet[k]), s.advdef[k]);
        }
        tsv.push('\n');
    }

    let n = cfg.grid_count.min(images.len()).max(1);
    let grid = vec![
        images[..n].to_vec(),
        carlini[..n].iter().map(|r| r.adversarial.clone()).collect(),
        manigen[..n].iter().map(|r| r.adversarial.clone()).collect(),
    ];

    Ok(Experiment { report, sample_indices: idx, labels, carlini, manigen, examples_tsv: tsv, grid })
}

/// Validates `cfg`, obtains models, runs the grid and writes the artifacts
/// to `cfg.out_dir`.
pub fn run_experiment(cfg: &RunConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    let models = obtain_models(cfg, &data)?;
    let exp = run_with_models(cfg, &data, &models)?;
    exp.write(&cfg.out_dir)?;
    log::info!("wrote report to {}", cfg.out_dir.display());
    Ok(exp.report)
}
