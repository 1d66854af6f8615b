//! End-to-end protocols: configuration, checkpoints, training runs and the
//! file-level commands behind the CLI.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod train;

pub use checkpoint::{Checkpoint, TrainingMeta};
pub use config::RunConfig;
pub use train::{dev_mrr, oracle_teacher, train, EpochRecord, Hooks, Phase, StepRecord, TrainData, TrainRun};
