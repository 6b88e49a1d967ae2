//! Holdout protocol, training loop, metrics and experiment reports.

mod experiment;
mod metrics;
mod splits;
mod train;

pub use experiment::{
    evaluate, evaluate_checkpoints, run_experiment, run_on_images, split_plan, write_report, write_summary_tables,
    ExperimentReport, FoldResult,
};
pub use metrics::{
    aggregate, metrics, normalize_confusion, summarize, ConfusionMatrix, MetricsReport, Summary, METRIC_NAMES,
};
pub use splits::{make_splits, Fold, SplitOptions, SplitPlan};
pub use train::{
    predict_all, train, train_model, train_observed, EpochStats, Example, TrainConfig, ACCUMULATION_GROUPS,
};
