//! Scenario files, the receding-horizon closed loop and its CSV output.

pub mod closed_loop;
pub mod metrics;
pub mod once;
pub mod scenario;

pub use closed_loop::{parse_strategy, run_closed_loop, RunLog, RunOptions, StepRecord, Strategy};
pub use metrics::{emit_metrics, fmt_sig};
pub use scenario::{load_scenario, parse_scenario, Scenario, ScenarioError};
