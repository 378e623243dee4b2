//! Run configuration, metrics files and the experiment drivers behind the CLI.

pub mod config;
pub mod experiments;
pub mod metrics;

pub use config::{ConfigError, ConfigErrors, RunConfig};
pub use experiments::{compare, eval, sweep, train, CompareOutcome, EvalReport, SweepCell, TrainOutcome};
pub use metrics::{parse_metrics, FinalStats, SummaryRow, FINAL_WINDOW};
