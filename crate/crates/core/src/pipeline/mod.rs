//! Orchestration: configuration, checkpoints, metrics, plots, the stage
//! runner and paired evaluation.
//!
//! Every stage writes into `<out>/<stage>/`: `model.fgpl`, `metrics.csv`
//! and `summary.txt`, plus stage extras (the pretraining dataset and
//! manifest, the learned reward, distillation intermediates and the
//! exposure report).

pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod metrics;
pub mod plot;
pub mod stages;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;
pub use eval::{evaluate, evaluate_named, EvalReport, Model};
pub use metrics::{MetricsLog, MetricsRow};
pub use plot::{plot, render_svg};
pub use stages::{model_path, run_all, run_stage, stage_dir, Stage, StageReport};
