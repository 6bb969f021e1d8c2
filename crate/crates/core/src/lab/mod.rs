//! Configuration, toy datasets, checkpoints, experiment orchestration and
//! plot export.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod experiment;
pub mod plots;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};
pub use config::{DatasetSpec, ExperimentConfig, ScheduleSpec, SourceSpec, OUT_DIR_ENV};
pub use dataset::generate_dataset;
pub use experiment::{run_experiment, Method, Models, Outcome, Role};
pub use plots::export_plots;
