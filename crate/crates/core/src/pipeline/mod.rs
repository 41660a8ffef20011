//! Experiment orchestration: configuration, checkpoints, the shared training
//! loop and the two end-to-end experiments.

pub mod checkpoint;
pub mod config;
pub mod experiment;
pub mod trainer;

pub use checkpoint::{Checkpoint, CheckpointManifest};
pub use config::{ArchConfig, Preset, TrainRunConfig};
pub use experiment::{run_experiment_one, run_experiment_two, Run, RunLayout};
