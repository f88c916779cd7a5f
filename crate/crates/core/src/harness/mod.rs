//! Desk-scale experiment driver: synthetic tasks, training, sweeps and
//! seed-paired comparisons.

pub mod config;
pub mod optim;
pub mod report;
pub mod stats;
pub mod sweep;
pub mod task;
pub mod train;

pub use config::{ExperimentConfig, MethodRates};
pub use optim::{AdamW, LinearSchedule, OptimizerConfig};
pub use stats::{mad, median, sign_flip_test};
pub use sweep::{
    compare, hiddenkey_bundle, run_cells, sweep, CellResult, CompareReport, Method, MethodSummary,
    PairTest, SweepAxis, SweepReport, SweepSummary,
};
pub use task::{Dataset, SyntheticTask, TaskData, TaskKind};
pub use train::{evaluate, read_metrics, train, train_on, Evaluation, RunRecord, TrainOutcome};
