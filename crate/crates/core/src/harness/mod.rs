//! Continual-learning scenario execution and metrics.

pub(crate) mod learner;
mod metrics;
mod model;
mod report;
mod runner;
mod scenario;

pub use learner::{Hyperparams, Learner, Predictor};
pub use metrics::{accuracy, bwt, macro_f1, mean_std, ResultMatrix};
pub use model::{DkvbModel, KeyInitKind, KeyInitStrategy, KEY_INIT_BATCH};
pub use report::{curve_table, from_jsonl, parse_curve_table, to_jsonl, MetricRecord, TimingRecord};
pub use runner::{
    evaluate_task, full_test_accuracy, progressive_eval, run_scenario, train_task, RunOutcome, TaskScore,
    TaskTiming,
};
pub use scenario::{ScenarioKind, ScenarioSpec, TaskSet};
