//! Scenario files, named experiments and their persisted results.

pub mod experiment;
pub mod io;
pub mod render;
pub mod report;
pub mod scenario;

pub use experiment::{
    default_out_dir, preset, run_experiment, run_scenario, Preset, RunOptions, EXPERIMENTS,
};
pub use report::{export_report, parse_report, Expectation, ExperimentReport, ReportFormat};
pub use scenario::{parse_scenario, scenario_to_toml, Analysis, Scenario, SCHEMA_VERSION};
