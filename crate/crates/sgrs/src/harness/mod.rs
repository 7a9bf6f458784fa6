//! Experiment orchestration: run configuration, the training loop,
//! checkpointing, evaluation, ablation grids, and report rendering.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod evaluate;
pub mod report;
pub mod svg;
pub mod sweep;
pub mod train;

pub use config::{Augmentation, RegionAssignment, RegionLoss, RunConfig, Variant};
pub use train::{train, train_with, RunRecord, StepTrace, TrainOptions};
