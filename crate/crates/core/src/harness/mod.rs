//! Experiment orchestration: configuration, artifact layout, the
//! strategy comparison and its report.

pub mod config;
pub mod experiment;
pub mod report;

pub use config::{EvaluationConfig, ExperimentConfig, OUTPUT_ENV};
pub use experiment::{
    evaluate_prediction_error, generate_planning_problems, generate_test_set, run_comparison, Layout, PlanRecord,
    TaskSuite,
};
pub use report::{build_report, CellSummary, PlanStats, Report};
