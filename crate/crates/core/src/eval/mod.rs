//! Test accuracies, run configuration, reports and the experiment grid.

pub mod accuracy;
pub mod config;
pub mod experiment;
pub mod report;

pub use accuracy::{test_accuracy_defended, test_accuracy_plain, InputKind};
pub use config::{parse_config, ModelPaths, RunConfig};
pub use experiment::{
    attack_config, calibrate_magnet, generate, load_data, obtain_models, run_experiment, run_with_models,
    select_samples, train_advdef, train_autoencoder, train_classifier, Experiment, Models,
};
pub use report::{mean_median, AttackSummary, Cell, ClassifierKind, EvalReport, ExampleKind};
