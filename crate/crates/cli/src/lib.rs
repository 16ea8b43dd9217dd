//! Experiment harness: dataset and checkpoint files, training, evaluation
//! sweeps, multiplication counts and pattern ablation.

pub mod commands;
pub mod config;
pub mod eval;
pub mod formats;
pub mod train;

pub use config::{RunConfig, Scale, Task};
pub use eval::EvalRecord;
