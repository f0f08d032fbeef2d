//! Toy data, evaluation metrics, the experiment driver and the command line.

pub mod cli;
mod config;
mod dataset;
mod experiment;
mod metrics;
mod verify;

pub use config::{ExperimentConfig, KEYS};
pub use dataset::{make_toy_dataset, smooth_corpus, Family, ToyDataset};
pub use experiment::{
    encode_dataset, evaluate, fit_tokenizer, load_dataset, mr_sweep, run_experiment, token_accuracy, train_model,
    ExperimentOutcome, RunSeeds,
};
pub use metrics::{pixel_features, psnr, ssim, toy_frechet, usage_entropy, MetricsReport, FRECHET_EPS};
pub use verify::{verify_equivalence, CheckResult};
