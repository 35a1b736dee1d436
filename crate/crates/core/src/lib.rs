//! Multifidelity Monte Carlo estimation of expectations, variances and Sobol
//! indices over a hierarchy of models with decreasing cost.
//!
//! The pipeline is pilot statistics, optimal sample allocation and the
//! telescoping estimator; the nonlinear variant maps each low-fidelity output
//! through a fitted regression before combining.

pub mod allocation;
pub mod error;
pub mod estimators;
pub mod hierarchy;
mod numerics;
pub mod pilot;
pub mod reference;
pub mod regression;
pub mod sampling;
pub mod study;

pub use allocation::{
    aggregate_vector_stats, optimal_allocation, optimal_allocation_with, predicted_mse,
    AggregatedStats, AllocationOptions, AllocationPlan, CostModel,
};
pub use error::{MfmcError, Result};
pub use estimators::{
    mfmc_expectation, mfmc_nonlinear, mfmc_sobol, mfmc_statistic, statistic_by_name,
    EstimateReport, EstimatorMode, Expectation, SobolIndices, Statistic, Variance,
};
pub use hierarchy::{builtin_hierarchy, InputDistribution, Model, ModelHierarchy};
pub use pilot::{PilotStats, StatsKind};
pub use reference::ReferenceValues;
pub use regression::{GaussianProcess, RegressionBridge, RegressorKind};
pub use sampling::{CostConvention, NestedEvaluations, SampleSet};
pub use study::{Study, StudyConfig, StudyResults};
