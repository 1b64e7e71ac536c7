//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion.
//! With `ACCEPTANCE_STRICT` set, any FAIL makes the exit status non-zero.
//!
//! `MNIST_DIR` points at the four MNIST IDX files (default
//! `/root/data/mnist`). When `ACCEPTANCE_CACHE_DIR` is set, trained models are
//! saved there and reused by later runs; training-time limits are then only
//! checked on the run that trained.

#[path = "../../core/tests/common/gradcheck.rs"]
mod gradcheck;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use advkit::attack::{box_transform, AttackKind};
use advkit::data::{load_idx, parse_cifar_bin, read_weights, write_weights, CIFAR_RECORD};
use advkit::defense::Outcome;
use advkit::eval::{
    self, test_accuracy_defended, test_accuracy_plain, ClassifierKind, ExampleKind, InputKind, Models, RunConfig,
};
use advkit::model::{Dataset, ModelSpec, TrainedModel};
use advkit::{Activation, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const GRADIENT_BUDGET: Duration = Duration::from_secs(60);
const CLASSIFIER_BUDGET: Duration = Duration::from_secs(30 * 60);
const AUTOENCODER_BUDGET: Duration = Duration::from_secs(20 * 60);
const ATTACK_BUDGET_SECS: f64 = 30.0 * 60.0;
const PROPERTY_BUDGET: Duration = Duration::from_secs(60);

struct Verdicts(Vec<(u8, bool, String)>);

impl Verdicts {
    fn record(&mut self, n: u8, pass: bool, detail: impl Into<String>) {
        self.0.push((n, pass, detail.into()));
    }
}

fn l2(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum::<f64>().sqrt()
}

fn labels(raw: &[u8]) -> Vec<usize> {
    raw.iter().map(|&l| usize::from(l)).collect()
}

fn gradient_suite(v: &mut Verdicts) {
    let t = Instant::now();
    let results = gradcheck::run_suite(10);
    let elapsed = t.elapsed();
    let worst = results.iter().cloned().fold(("none", 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = results.len() >= 20 && worst.1 < gradcheck::TOLERANCE && elapsed < GRADIENT_BUDGET;
    v.record(
        1,
        pass,
        format!("{} ops x 10 seeds, worst {} rel err {:.2e}, {:.1}s", results.len(), worst.0, worst.1, elapsed.as_secs_f64()),
    );
}

fn property_suite(v: &mut Verdicts) {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (mut outside, mut worst_identity, mut worst_softmax) = (0usize, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let x = gradcheck::uniform(&mut rng, &[4, 4, 1], 0.0, 1.0);
        let w = gradcheck::uniform(&mut rng, &[4, 4, 1], -3.0, 3.0);
        let y = box_transform(&x, &w).unwrap();
        outside += y.data().iter().filter(|&&v| !(v > 0.0 && v < 1.0)).count();
        let id = box_transform(&x, &Tensor::zeros(&[4, 4, 1])).unwrap();
        worst_identity = id.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).fold(worst_identity, f64::max);

        let z = gradcheck::uniform(&mut rng, &[1, 10], -20.0, 20.0);
        let mut g = Graph::<f64>::new();
        let zi = g.constant(z);
        let p = g.activation(zi, Activation::Softmax).unwrap();
        worst_softmax = worst_softmax.max((g.value(p).data().iter().sum::<f64>() - 1.0).abs());
    }
    let r = |o: &[Outcome], l: &[usize], k| test_accuracy_defended(o, l, k).unwrap();
    use Outcome::{Classified as C, Rejected as R};
    let fixtures = [
        test_accuracy_plain(&[1, 2, 3, 0], &[1, 2, 3, 4]).unwrap() == 0.75,
        test_accuracy_plain(&[5, 6], &[5, 6]).unwrap() == 1.0,
        test_accuracy_plain(&[1, 1], &[0, 0]).unwrap() == 0.0,
        r(&[C(1), C(2), R, C(9)], &[1, 2, 3, 4], InputKind::Adversarial) == 0.75,
        r(&[R, R, R], &[0, 1, 2], InputKind::Adversarial) == 1.0,
        r(&[R, R, R], &[0, 1, 2], InputKind::Original) == 0.0,
        test_accuracy_plain(&[], &[]).is_err(),
    ];
    let elapsed = t.elapsed();
    let pass = outside == 0
        && worst_identity < 1e-4
        && worst_softmax < 1e-6
        && fixtures.iter().all(|&f| f)
        && elapsed < PROPERTY_BUDGET;
    v.record(
        7,
        pass,
        format!(
            "10000 pairs: {outside} outside (0,1), identity err {worst_identity:.2e}, softmax err {worst_softmax:.2e}, \
             {}/{} fixtures, {:.1}s",
            fixtures.iter().filter(|&&f| f).count(),
            fixtures.len(),
            elapsed.as_secs_f64()
        ),
    );
}

/// Loads `<cache>/<name>.mgwt` or trains and stores it; also returns the
/// training time when training happened.
fn model(
    cache: &Option<PathBuf>,
    name: &str,
    spec: ModelSpec,
    fit: impl FnOnce() -> advkit::Result<TrainedModel>,
) -> advkit::Result<(TrainedModel, Option<Duration>)> {
    if let Some(dir) = cache {
        let path = dir.join(format!("{name}.mgwt"));
        if path.is_file() {
            return Ok((advkit::data::load_weights(&spec, &path)?, None));
        }
    }
    let t = Instant::now();
    let m = fit()?;
    let elapsed = t.elapsed();
    if let Some(dir) = cache {
        advkit::data::save_weights(&m, &dir.join(format!("{name}.mgwt")))?;
    }
    Ok((m, Some(elapsed)))
}

fn budget(elapsed: Option<Duration>, limit: Duration) -> (bool, String) {
    match elapsed {
        Some(d) => (d <= limit, format!("{:.0}s", d.as_secs_f64())),
        None => (true, "cached".into()),
    }
}

fn desk_config(mnist: &Path, out: &Path) -> RunConfig {
    let preset = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mnist-desk.cfg");
    let mut cfg = RunConfig::from_file(&preset).expect("desk preset parses");
    cfg.data_dir = mnist.to_path_buf();
    cfg.out_dir = out.to_path_buf();
    cfg
}

fn pipeline(v: &mut Verdicts, mnist: &Path, work: &Path) -> advkit::Result<()> {
    let cache = std::env::var_os("ACCEPTANCE_CACHE_DIR").map(PathBuf::from);
    if let Some(dir) = &cache {
        std::fs::create_dir_all(dir)?;
    }
    let cfg = desk_config(mnist, &work.join("run"));
    cfg.validate()?;
    let data = eval::load_data(&cfg)?;
    let test_labels = labels(&data.test_labels);

    let (classifier, clf_time) =
        model(&cache, "classifier", ModelSpec::classifier(Dataset::Mnist), || eval::train_classifier(&cfg, &data))?;
    let acc = test_accuracy_plain(&classifier.predict_labels(&data.test_images)?, &test_labels)?;
    let (ok, t) = budget(clf_time, CLASSIFIER_BUDGET);
    v.record(2, acc >= 0.97 && ok, format!("test accuracy {acc:.4} (need >= 0.97), training {t}"));

    let (autoencoder, ae_time) =
        model(&cache, "autoencoder", ModelSpec::autoencoder(Dataset::Mnist), || eval::train_autoencoder(&cfg, &data))?;
    let h = autoencoder.history();
    let (first, last) = (h.first().map_or(f64::NAN, |e| e.loss), h.last().map_or(f64::NAN, |e| e.loss));
    let recon = autoencoder.reconstruct(&data.test_images)?;
    let mae = recon.data().iter().zip(data.test_images.data()).map(|(a, b)| f64::from((a - b).abs())).sum::<f64>()
        / recon.len() as f64;
    let (ok, t) = budget(ae_time, AUTOENCODER_BUDGET);
    v.record(
        3,
        last < first && mae <= 0.05 && ok,
        format!("BCE {first:.4} -> {last:.4} over {} epochs, test MAE {mae:.4} (need <= 0.05), training {t}", h.len()),
    );

    let (advdef, _) =
        model(&cache, "advdef", ModelSpec::classifier(Dataset::Mnist), || eval::train_advdef(&cfg, &data))?;
    let models = Models { autoencoder, classifier, advdef };

    // Weight round trip on the trained classifier, kept for criterion 9.
    let mut bytes = Vec::new();
    write_weights(&models.classifier, &mut bytes)?;
    let back = read_weights(&ModelSpec::classifier(Dataset::Mnist), &bytes)?;
    let weights_exact = back
        .weights()
        .iter()
        .zip(models.classifier.weights())
        .all(|(a, b)| a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    let probe = data.test_images.select(&(0..256).collect::<Vec<_>>());
    let same_logits = back.predict_logits_batch(&probe)?.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        == models.classifier.predict_logits_batch(&probe)?.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();

    let exp = eval::run_with_models(&cfg, &data, &models)?;
    let report = &exp.report;
    let cell = |e, c| report.cell(e, c).map(|c| c.accuracy).unwrap_or(f64::NAN);
    let mg = report.attack(AttackKind::ManiGen).expect("manigen ran");
    let cw = report.attack(AttackKind::Carlini).expect("carlini ran");
    let mg_success = 1.0 - cell(ExampleKind::ManiGen, ClassifierKind::Standalone);
    let cw_success = 1.0 - cell(ExampleKind::Carlini, ClassifierKind::Standalone);
    let n = exp.sample_indices.len();
    v.record(
        4,
        n == 100
            && mg_success >= 0.95
            && cw_success >= 0.95
            && mg.logits_queries == 0
            && mg.seconds <= ATTACK_BUDGET_SECS
            && cw.seconds <= ATTACK_BUDGET_SECS,
        format!(
            "{n} images: manigen success {mg_success:.3} ({:.0}s, {} logits queries, {} oracle queries), \
             carlini success {cw_success:.3} ({:.0}s)",
            mg.seconds, mg.logits_queries, mg.oracle_queries, cw.seconds
        ),
    );

    let magnet = eval::calibrate_magnet(&cfg, &data, &models)?;
    let clean: Vec<Outcome> = magnet.predict_batch(&data.test_images)?.into_iter().map(|v| v.outcome).collect();
    let clean_acc = test_accuracy_defended(&clean, &test_labels, InputKind::Original)?;
    let cw_magnet = cell(ExampleKind::Carlini, ClassifierKind::Magnet);
    // Diagnostics only: how much one reformer pass costs on clean inputs, and
    // whether a second pass moves less than the first.
    let reformed_acc = test_accuracy_plain(&models.classifier.predict_labels(&recon)?, &test_labels)?;
    let twice = models.autoencoder.reconstruct(&recon)?;
    let m = data.test_images.batch_item(0).len();
    let idempotent = (0..test_labels.len())
        .filter(|&i| {
            let r = &recon.data()[i * m..(i + 1) * m];
            let x = &data.test_images.data()[i * m..(i + 1) * m];
            let rr = &twice.data()[i * m..(i + 1) * m];
            l2(rr, r) <= l2(r, x)
        })
        .count() as f64
        / test_labels.len() as f64;
    v.record(
        5,
        clean_acc >= 0.95 && cw_magnet >= 0.90,
        format!(
            "clean test accuracy {clean_acc:.4} (need >= 0.95), Carlini defended accuracy {cw_magnet:.3} (need >= 0.90), \
             threshold {:.4}; standalone accuracy on reformed clean images {reformed_acc:.4}, \
             idempotence bound holds on {:.1}% (expect >= 90%)",
            magnet.threshold(),
            idempotent * 100.0
        ),
    );

    let mg_adv = cell(ExampleKind::ManiGen, ClassifierKind::AdvDef);
    let cw_adv = cell(ExampleKind::Carlini, ClassifierKind::AdvDef);
    v.record(
        6,
        cw_adv - mg_adv >= 0.05,
        format!(
            "AdvDef accuracy on ManiGen {mg_adv:.3} vs Carlini {cw_adv:.3} (gap {:.1} points, need >= 5); \
             MagNet ManiGen {:.3}",
            (cw_adv - mg_adv) * 100.0,
            cell(ExampleKind::ManiGen, ClassifierKind::Magnet)
        ),
    );
    println!("{}", report.render_table());

    determinism(v, &cfg, &models, work)?;
    formats(v, mnist, weights_exact && same_logits)?;
    Ok(())
}

/// Two `evaluate` runs of the binary on the same models and settings.
fn determinism(v: &mut Verdicts, cfg: &RunConfig, models: &Models, work: &Path) -> advkit::Result<()> {
    let model_dir = work.join("models");
    for (name, m) in [("autoencoder", &models.autoencoder), ("classifier", &models.classifier), ("advdef", &models.advdef)]
    {
        advkit::data::save_weights(m, &model_dir.join(format!("{name}.mgwt")))?;
    }
    let config = work.join("determinism.cfg");
    let text = format!(
        "dataset = mnist\ndata_dir = {}\nsamples = 4\ngrid_count = 4\ntrain.enabled = false\n\
         models.autoencoder = {}\nmodels.classifier = {}\nmodels.advdef = {}\n\
         attack.manigen.c = 100\nattack.manigen.iterations = 60\nattack.carlini.iterations = 60\n",
        cfg.data_dir.display(),
        model_dir.join("autoencoder.mgwt").display(),
        model_dir.join("classifier.mgwt").display(),
        model_dir.join("advdef.mgwt").display(),
    );
    std::fs::write(&config, text)?;
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = work.join(format!("eval_{run}"));
        let run_out = Command::new(env!("CARGO_BIN_EXE_advkit"))
            .args(["evaluate", "--seed", "7", "--config"])
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .env("RUST_LOG", "warn")
            .output()?;
        if !run_out.status.success() {
            let err = String::from_utf8_lossy(&run_out.stderr);
            v.record(8, false, format!("evaluate run {run} exited with {}: {}", run_out.status, err.trim()));
            return Ok(());
        }
        outputs.push((std::fs::read(out.join("report.txt"))?, std::fs::read(out.join("grid.png"))?));
    }
    let same_report = outputs[0].0 == outputs[1].0;
    let same_grid = outputs[0].1 == outputs[1].1;
    v.record(
        8,
        same_report && same_grid && !outputs[0].0.is_empty(),
        format!(
            "report {} ({} bytes), grid {} ({} bytes)",
            if same_report { "identical" } else { "differs" },
            outputs[0].0.len(),
            if same_grid { "identical" } else { "differs" },
            outputs[0].1.len()
        ),
    );
    Ok(())
}

fn formats(v: &mut Verdicts, mnist: &Path, weights_ok: bool) -> advkit::Result<()> {
    // IDX: decode the first records straight from the file bytes.
    let img_path = mnist.join("t10k-images-idx3-ubyte");
    let lbl_path = mnist.join("t10k-labels-idx1-ubyte");
    let raw_img = std::fs::read(&img_path)?;
    let raw_lbl = std::fs::read(&lbl_path)?;
    let be = |b: &[u8], at: usize| u32::from_be_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]]) as usize;
    let loaded = load_idx(&img_path, &lbl_path)?;
    let header_ok = be(&raw_img, 0) == 0x803
        && be(&raw_lbl, 0) == 0x801
        && be(&raw_img, 4) == loaded.count
        && (be(&raw_img, 8), be(&raw_img, 12)) == (loaded.height, loaded.width);
    let records_ok = [0usize, 1, 9_999].iter().all(|&r| {
        let at = 16 + r * 784;
        loaded.pixels[r * 784..(r + 1) * 784] == raw_img[at..at + 784] && loaded.labels[r] == raw_lbl[8 + r]
    });

    // CIFAR-10: one synthetic record, checked against planar offsets by hand.
    let mut rec = vec![0u8; CIFAR_RECORD];
    rec[0] = 6;
    for (i, b) in rec[1..].iter_mut().enumerate() {
        *b = ((i * 7 + i / 1024) % 251) as u8;
    }
    let (cl, cp) = parse_cifar_bin(&rec)?;
    let cifar_ok = cl == vec![6]
        && [(0usize, 0usize), (0, 31), (17, 4), (31, 31)].iter().all(|&(y, x)| {
            (0..3).all(|c| cp[(y * 32 + x) * 3 + c] == rec[1 + c * 1024 + y * 32 + x])
        });
    v.record(
        9,
        header_ok && records_ok && cifar_ok && weights_ok,
        format!(
            "idx header {header_ok}, idx records {records_ok}, cifar record {cifar_ok}, weight round trip bit-exact {weights_ok}"
        ),
    );
    Ok(())
}

fn main() {
    // Tolerate the flags cargo's test runner passes to every target.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mnist = std::env::var_os("MNIST_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("/root/data/mnist"));
    let work = tempfile::tempdir().expect("temp dir");
    let mut v = Verdicts(Vec::new());
    gradient_suite(&mut v);
    property_suite(&mut v);
    if let Err(e) = pipeline(&mut v, &mnist, work.path()) {
        println!("pipeline error: {e}");
    }
    for n in 1..=9u8 {
        if !v.0.iter().any(|(k, _, _)| *k == n) {
            v.record(n, false, "not reached");
        }
    }
    v.0.sort_by_key(|(n, _, _)| *n);
    for (n, pass, detail) in &v.0 {
        println!("criterion {n}: {} - {detail}", if *pass { "PASS" } else { "FAIL" });
    }
    let passed = v.0.iter().filter(|(_, p, _)| *p).count();
    println!("acceptance: {passed}/9 criteria passed");
    if passed != 9 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
