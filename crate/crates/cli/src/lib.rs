//! Experiment harness: config-driven runs, sweeps over method and scale,
//! report comparison and plotting.

pub mod config;
pub mod diff;
pub mod engine;
pub mod plot;
pub mod sweep;

pub use config::{tiny_model, AlignmentConfig, AttributionConfig, EvalConfig, RunConfig};
pub use diff::{report_diff, MetricDelta};
pub use engine::{evaluate, run, run_with, RunOutcome};
pub use sweep::{sweep, GridConfig, SweepOutcome};
