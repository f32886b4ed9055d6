//! Training, slot-count/object-count sweeps and report emission.
//!
//! A run is fully determined by an [`ExperimentConfig`] and a seed. Training
//! writes a checkpoint plus a JSON log; evaluation turns a checkpoint into
//! [`SweepResult`] records; reporting writes the records as CSV and renders
//! median-across-seeds SVG plots.

pub mod config;
pub mod eval;
pub mod plot;
pub mod report;
pub mod train;

pub use config::{ExperimentConfig, Variant};
pub use eval::{evaluate_sweep, ObjectCount, SweepResult};
pub use report::{emit_report, median, trend_check, Metric, ReportFiles, TrendCheck};
pub use train::{save_run, train, TrainedModel, TrainingLog};
