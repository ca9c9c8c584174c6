//! Experiment driver: configuration, data sources, partitioning, metrics, and
//! the end-to-end runner used by the CLI.

pub mod config;
pub mod data;
pub mod experiment;
pub mod idx;
pub mod metrics;
pub mod partition;

pub use config::ExperimentConfig;
pub use data::{synth_dataset, SyntheticData, SyntheticSpec};
pub use experiment::{prepare, run_experiment, ExperimentOutput, Prepared};
pub use idx::load_idx;
pub use metrics::{measure_subtask, MetricsRecord, SubModelRecord};
pub use partition::{partition_iid, partition_noniid_shards};
