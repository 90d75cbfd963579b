//! Experiment front-end: architecture strings, checkpoints, metrics files
//! and the end-to-end MNIST pipeline.

pub mod arch;
pub mod checkpoint;
pub mod experiment;
pub mod metrics;

pub use arch::{format_arch, parse_arch, ArchError};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointError};
pub use experiment::{run_experiment, ExperimentConfig, ExperimentError, ExperimentSummary};
pub use metrics::{emit_metrics, read_metrics, MetricsRow, Phase};
