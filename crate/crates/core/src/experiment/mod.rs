//! Training, evaluation, and the experiment protocols built on them.

mod iterative;
mod metrics;
mod train;

pub use iterative::{iterative_protocol, IterativeArm, IterativeOutcome};
pub use metrics::{
    compute_metrics, mean_std, per_location_report, MetricSet, WinnerRow, WinnerTable,
};
pub use train::{evaluate, train, Checkpoint, Forecaster, TrainConfig, TrainPlan, TrainReport};
