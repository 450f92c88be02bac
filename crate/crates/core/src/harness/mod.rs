//! Config parsing, seeded sweeps and report emission.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{validate_config, Check, ExperimentConfig, GridSpec};
pub use experiment::{run_experiment, Manifest, SweepResult, SweepRow, ValidatorRow};
pub use report::{emit_csv_report, fmt_num, read_sweep_csv};
