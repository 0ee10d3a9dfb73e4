//! End-to-end formation scenario: configuration, simulation loop, run log
//! and artifacts.

pub mod config;
pub mod log;
pub mod runner;

pub use config::{ConfigError, ScenarioConfig};
pub use log::{compute_metrics, emit, read_rows, write_rows, Metrics, StepRow};
pub use runner::{run, synthesize_terminal, RunOutput, Scenario, ScenarioError, TerminalSummary};
