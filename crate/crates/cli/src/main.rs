use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use advkit::attack::AttackKind;
use advkit::data::{load_weights, save_weights};
use advkit::defense::Outcome;
use advkit::eval::{self, test_accuracy_defended, test_accuracy_plain, InputKind, Models, RunConfig};
use advkit::{Error, ModelSpec, TrainedModel};

#[derive(Parser)]
#[command(name = "advkit", version, about = "Train models, run attacks and evaluate defenses")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Extra `key=value` setting, applied after the config file.
    #[arg(long = "set", short = 's', global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoencoder.
    TrainAe,
    /// Train the standalone classifier.
    TrainClf,
    /// Train the adversarially trained classifier.
    TrainAdvdef,
    /// Calibrate the detector threshold and score clean test images.
    CalibrateMagnet,
    /// Run one attack on the sampled test images.
    Attack {
        #[arg(long, value_parser = parse_kind)]
        kind: AttackKind,
    },
    /// Run the full attack x defense grid.
    Evaluate,
    /// Write an original / Carlini / ManiGen grid of the first samples.
    ExportGrid {
        /// Output file, `<out>/grid.png` by default.
        #[arg(long)]
        path: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> Result<AttackKind, String> {
    AttackKind::parse(&s.replace('-', "_")).map_err(|e| e.to_string())
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::new(advkit::Dataset::Mnist),
    };
    for kv in &cli.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Validation(format!("--set expects key=value, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &cli.data {
        cfg.data_dir = d.clone();
    }
    Ok(cfg)
}

fn require(path: &Option<PathBuf>, key: &str) -> anyhow::Result<PathBuf> {
    match path {
        Some(p) if p.is_file() => Ok(p.clone()),
        Some(p) => Err(Error::Validation(format!("{key}: {} does not exist", p.display())).into()),
        None => Err(Error::Validation(format!("{key} must point to a trained model")).into()),
    }
}

fn load(path: &Path, spec: ModelSpec) -> anyhow::Result<TrainedModel> {
    Ok(load_weights(&spec, path)?)
}

/// Everything but the model paths, which each command checks itself.
fn validate_common(cfg: &RunConfig) -> anyhow::Result<()> {
    let mut probe = cfg.clone();
    probe.train = true;
    probe.models = Default::default();
    Ok(probe.validate()?)
}

fn save(model: &TrainedModel, cfg: &RunConfig, name: &str) -> anyhow::Result<()> {
    let path = cfg.out_dir.join("models").join(format!("{name}.mgwt"));
    save_weights(model, &path)?;
    for e in model.history() {
        let acc = e.accuracy.map(|a| format!(" accuracy {a:.4}")).unwrap_or_default();
        println!("epoch {:>3} loss {:.6}{acc}", e.epoch, e.loss);
    }
    println!("saved {}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    let cfg = load_config(cli)?;
    let ds = cfg.dataset;
    match &cli.command {
        Command::TrainAe => {
            validate_common(&cfg)?;
            let data = eval::load_data(&cfg)?;
            let m = eval::train_autoencoder(&cfg, &data)?;
            save(&m, &cfg, "autoencoder")
        }
        Command::TrainClf => {
            validate_common(&cfg)?;
            let data = eval::load_data(&cfg)?;
            let m = eval::train_classifier(&cfg, &data)?;
            let acc = test_accuracy_plain(&m.predict_labels(&data.test_images)?, &labels(&data.test_labels))?;
            save(&m, &cfg, "classifier")?;
            println!("test accuracy {acc:.4}");
            Ok(())
        }
        Command::TrainAdvdef => {
            validate_common(&cfg)?;
            let data = eval::load_data(&cfg)?;
            let m = eval::train_advdef(&cfg, &data)?;
            let acc = test_accuracy_plain(&m.predict_labels(&data.test_images)?, &labels(&data.test_labels))?;
            save(&m, &cfg, "advdef")?;
            println!("test accuracy {acc:.4}");
            Ok(())
        }
        Command::CalibrateMagnet => {
            validate_common(&cfg)?;
            let ae = require(&cfg.models.autoencoder, "models.autoencoder")?;
            let clf = require(&cfg.models.classifier, "models.classifier")?;
            let data = eval::load_data(&cfg)?;
            let models = Models {
                autoencoder: load(&ae, ModelSpec::autoencoder(ds))?,
                classifier: load(&clf, ModelSpec::classifier(ds))?,
                advdef: load(&clf, ModelSpec::classifier(ds))?,
            };
            let magnet = eval::calibrate_magnet(&cfg, &data, &models)?;
            let out: Vec<Outcome> =
                magnet.predict_batch(&data.test_images)?.into_iter().map(|v| v.outcome).collect();
            let acc = test_accuracy_defended(&out, &labels(&data.test_labels), InputKind::Original)?;
            let rejected = out.iter().filter(|o| **o == Outcome::Rejected).count();
            let text = format!(
                "detector={}\nthreshold={:.6}\nclean_accuracy={acc:.6}\nclean_rejected={rejected}\n",
                magnet.detector().as_str(),
                magnet.threshold()
            );
            std::fs::create_dir_all(&cfg.out_dir)?;
            std::fs::write(cfg.out_dir.join("magnet.txt"), &text)?;
            print!("{text}");
            Ok(())
        }
        Command::Attack { kind } => {
            validate_common(&cfg)?;
            let needs_ae = matches!(kind, AttackKind::ManiGen | AttackKind::ManiGenEncoder);
            let ae = if needs_ae { Some(require(&cfg.models.autoencoder, "models.autoencoder")?) } else { None };
            let clf = require(&cfg.models.classifier, "models.classifier")?;
            let data = eval::load_data(&cfg)?;
            let classifier = load(&clf, ModelSpec::classifier(ds))?;
            let autoencoder = match &ae {
                Some(p) => load(p, ModelSpec::autoencoder(ds))?,
                None => TrainedModel::init(ModelSpec::autoencoder(ds), 0)?,
            };
            let models = Models { autoencoder, advdef: classifier.clone(), classifier };
            let idx = eval::select_samples(&cfg, &data, &models.classifier)?;
            let images: Vec<_> = idx.iter().map(|&i| data.test_images.batch_item(i)).collect();
            let ls: Vec<usize> = idx.iter().map(|&i| data.test_labels[i] as usize).collect();
            let acfg = eval::attack_config(&cfg, *kind);
            let res = eval::generate(*kind, &acfg, &images, &ls, &models)?;
            let mut tsv = String::from("sample\ttest_index\tlabel\tsuccess\tdistortion\titeration\toracle_queries\n");
            for (k, ((i, l), r)) in idx.iter().zip(&ls).zip(&res).enumerate() {
                let _ = writeln!(
                    tsv,
                    "{k}\t{i}\t{l}\t{}\t{:.6}\t{}\t{}",
                    u8::from(r.success),
                    r.distortion,
                    r.iteration,
                    r.oracle_queries
                );
            }
            std::fs::create_dir_all(&cfg.out_dir)?;
            let path = cfg.out_dir.join(format!("attack_{}.tsv", kind.as_str()));
            std::fs::write(&path, tsv)?;
            let ok = res.iter().filter(|r| r.success).count();
            let mean = res.iter().map(|r| r.distortion).sum::<f64>() / res.len() as f64;
            println!("{}: {ok}/{} succeeded, mean L2 {mean:.4}", kind.as_str(), res.len());
            println!("classifier logits queries: {}", models.classifier.logits_queries());
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Evaluate => {
            let report = eval::run_experiment(&cfg)?;
            print!("{}", report.render_table());
            Ok(())
        }
        Command::ExportGrid { path } => {
            let mut cfg = cfg.clone();
            cfg.validate()?;
            cfg.samples = cfg.grid_count.max(1);
            let data = eval::load_data(&cfg)?;
            let models = eval::obtain_models(&cfg, &data)?;
            let exp = eval::run_with_models(&cfg, &data, &models)?;
            let path = path.clone().unwrap_or_else(|| cfg.out_dir.join("grid.png"));
            exp.write_grid(&path)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn labels(raw: &[u8]) -> Vec<usize> {
    raw.iter().map(|&l| usize::from(l)).collect()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Validation(_)) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli).context("advkit failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
