//! Experiment orchestration: configuration, model preparation, scenarios,
//! cell execution and reporting.

pub mod config;
pub mod models;
pub mod report;
pub mod run;
pub mod scenarios;

pub use config::{config_schema, Budget, ExperimentConfig};
pub use models::{prepare_models, Models, TrainPolicy};
pub use report::{emit_plot_data, median, MetricRow, PlotFilter, RunManifest};
pub use run::{plan_jobs, run_scenario, run_with_models, AttackJob, RunOutcome};
pub use scenarios::{CellEnv, GroupStreams, Scenario, ScenarioRegistry};
