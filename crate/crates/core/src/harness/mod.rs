//! Experiment plumbing: configuration, checkpoints, evaluation and the
//! ablation driver used by the CLI.

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod experiment;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{DataConfig, ExperimentConfig, InferConfig};
pub use eval::{word_accuracy, EvalReport, PolicyReport};
pub use experiment::{ablate, prepare, run_experiment, Prepared};
