//! Synthetic data, replicated experiments and their summaries.

pub mod dgp;
pub mod experiment;
pub mod metrics;

pub use dgp::{DgpKind, DgpSpec, Truth};
pub use experiment::{
    coverage_experiment, shift_experiment, theorem2_experiment, ExperimentReport, ForestEstimator, MethodEstimate,
    MethodSummary, RepRow, TargetEstimator,
};
