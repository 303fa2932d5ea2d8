//! Behavioral scoring, parent-relative categorization and correlation
//! between probing and behavioral scores.

mod behavior;
mod compare;
mod correlation;
mod stats;

use thiserror::Error;

use crate::toy::ModelError;

pub use behavior::{
    evaluate_behavior, load_behavior_suites, BehaviorReport, BehaviorRow, BehaviorSuite,
    BehaviorSuiteEntry, BehaviorTask, BehaviorTaskEntry, SuiteMean, SuitesFile,
};
pub use compare::{
    categorize_vs_parents, compare_with_parents, Category, CategoryCounts, ParentComparison,
};
pub use correlation::{
    correlation_matrix, correlation_matrix_at, CorrelationMatrix, CorrelationMethod, Granularity,
    MIN_MODELS,
};
pub use stats::{fractional_ranks, pearson, spearman, StatsError};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("parameter `{name}` = {value} out of range: expected {expected}")]
    ParameterOutOfRange {
        name: &'static str,
        value: f64,
        expected: &'static str,
    },
    #[error("no behavior suites given")]
    NoSuites,
    #[error("behavior task `{0}` has no examples")]
    EmptyTask(String),
    #[error("duplicate behavior task `{suite}/{task}`")]
    DuplicateTask { suite: String, task: String },
    #[error("behavior suites file: {0}")]
    SuitesFile(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Shortest round-trip decimal form used in every CSV report.
pub fn fmt_score(v: f64) -> String {
    serde_json::to_string(&v).expect("finite score")
}
