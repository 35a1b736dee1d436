//! Multifidelity estimators built from nested evaluations and an allocation
//! plan.
//!
//! For a statistic with single-level estimator `q_hat`, the estimate is
//!
//! ```text
//! q_h = q_hat^(1)_{m_1} + sum_{i >= 2} alpha_i (q_hat^(i)_{m_i} - q_hat^(i)_{m_{i-1}})
//! ```
//!
//! where every inner estimate uses the first `m` rows of the model's shared
//! input sequence.

mod single_level;
mod statistic;

pub use single_level::*;
pub use statistic::*;

use serde::{Deserialize, Serialize};

use crate::allocation::AllocationPlan;
use crate::error::{MfmcError, Result};
use crate::pilot::StatsKind;
use crate::regression::RegressionBridge;
use crate::sampling::NestedEvaluations;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMode {
    Linear,
    Nonlinear,
}

impl EstimatorMode {
    pub fn label(self) -> &'static str {
        match self {
            EstimatorMode::Linear => "linear",
            EstimatorMode::Nonlinear => "nonlinear",
        }
    }
}

/// Provenance of the statistics a plan was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotMeta {
    pub kind: StatsKind,
    pub size: usize,
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub statistic: String,
    pub mode: EstimatorMode,
    pub values: Vec<f64>,
    /// Sobol indices divided by the estimated output variance.
    pub normalized: Option<Vec<f64>>,
    pub predicted_mse: f64,
    pub realized_cost: f64,
    pub plan: AllocationPlan,
    pub pilot: Option<PilotMeta>,
    pub seed: Option<u64>,
}

fn check_consistency(evals: &NestedEvaluations, plan: &AllocationPlan) -> Result<()> {
    let retained = plan.retained_indices();
    if evals.model_indices() != retained.as_slice() {
        return Err(MfmcError::PlanMismatch(format!(
            "evaluated models {:?}, plan retains {:?}",
            evals.model_indices(),
            retained
        )));
    }
    let counts = plan.retained_counts();
    if evals.counts() != counts.as_slice() {
        return Err(MfmcError::PlanMismatch(format!(
            "evaluated counts {:?}, plan has {:?}",
            evals.counts(),
            counts
        )));
    }
    Ok(())
}

/// The telescoping combination for `stat`.
pub fn mfmc_combine(
    evals: &NestedEvaluations,
    plan: &AllocationPlan,
    stat: &dyn Statistic,
) -> Result<Vec<f64>> {
    check_consistency(evals, plan)?;
    let counts = evals.counts();
    if counts[0] < stat.min_samples() {
        return Err(MfmcError::TooFewSamples {
            required: stat.min_samples(),
            actual: counts[0],
        });
    }
    let n_blocks = stat.layout().num_blocks(evals.input_dim());
    if evals.num_blocks() < n_blocks {
        return Err(MfmcError::PlanMismatch(format!(
            "{} needs {n_blocks} input blocks, got {}",
            stat.label(),
            evals.num_blocks()
        )));
    }
    let blocks = |k: usize| &evals.model_outputs(k)[..n_blocks];
    let mut values = stat.estimate(blocks(0), counts[0]);
    let n_comp = values.len();
    for (k, &model) in evals.model_indices().iter().enumerate().skip(1) {
        let alpha = &plan.alpha[model];
        if alpha.len() != n_comp {
            return Err(MfmcError::PlanMismatch(format!(
                "{} weights for {n_comp} components",
                alpha.len()
            )));
        }
        if counts[k] == counts[k - 1] {
            continue;
        }
        let upper = stat.estimate(blocks(k), counts[k]);
        let lower = stat.estimate(blocks(k), counts[k - 1]);
        for j in 0..n_comp {
            values[j] += alpha[j] * (upper[j] - lower[j]);
        }
    }
    Ok(values)
}

fn report(
    stat: &dyn Statistic,
    mode: EstimatorMode,
    values: Vec<f64>,
    evals: &NestedEvaluations,
    plan: &AllocationPlan,
) -> EstimateReport {
    EstimateReport {
        statistic: stat.label().to_string(),
        mode,
        values,
        normalized: None,
        predicted_mse: plan.predicted_mse,
        realized_cost: plan
            .retained_indices()
            .iter()
            .zip(evals.counts())
            .map(|(&i, &m)| plan.costs[i] * m as f64)
            .sum(),
        plan: plan.clone(),
        pilot: None,
        seed: None,
    }
}

/// Multifidelity estimate of the mean of every output component.
pub fn mfmc_expectation(evals: &NestedEvaluations, plan: &AllocationPlan) -> Result<EstimateReport> {
    mfmc_statistic(evals, plan, &Expectation)
}

/// Multifidelity estimate of an arbitrary statistic.
pub fn mfmc_statistic(
    evals: &NestedEvaluations,
    plan: &AllocationPlan,
    stat: &dyn Statistic,
) -> Result<EstimateReport> {
    let values = mfmc_combine(evals, plan, stat)?;
    Ok(report(stat, EstimatorMode::Linear, values, evals, plan))
}

/// Estimate with every low-fidelity output first mapped through its
/// regression bridge. The high-fidelity term stays raw.
pub fn mfmc_nonlinear_statistic(
    evals: &NestedEvaluations,
    plan: &AllocationPlan,
    bridge: &RegressionBridge,
    stat: &dyn Statistic,
) -> Result<EstimateReport> {
    let mapped = bridge.apply_to(evals)?;
    let values = mfmc_combine(&mapped, plan, stat)?;
    Ok(report(stat, EstimatorMode::Nonlinear, values, evals, plan))
}

/// Regression-bridged estimate of the mean.
pub fn mfmc_nonlinear(
    evals: &NestedEvaluations,
    plan: &AllocationPlan,
    bridge: &RegressionBridge,
) -> Result<EstimateReport> {
    mfmc_nonlinear_statistic(evals, plan, bridge, &Expectation)
}

/// Sobol indices with their normalized values. The normalizer is the
/// multifidelity estimate of the pooled output variance on the same
/// samples, combined with its own weights `variance_alpha`.
pub fn mfmc_sobol(
    evals: &NestedEvaluations,
    plan: &AllocationPlan,
    family: &SobolIndices,
    variance_alpha: Vec<Vec<f64>>,
    bridge: Option<&RegressionBridge>,
) -> Result<EstimateReport> {
    let (source, mode) = match bridge {
        Some(b) => (b.apply_to(evals)?, EstimatorMode::Nonlinear),
        None => (evals.clone(), EstimatorMode::Linear),
    };
    let values = mfmc_combine(&source, plan, family)?;
    let variance = mfmc_combine(&source, &plan.with_alpha(variance_alpha), &PooledVariance)?;
    let d = evals.input_dim();
    let normalized = values
        .iter()
        .enumerate()
        .map(|(c, v)| v / variance[c / d])
        .collect();
    let mut out = report(family, mode, values, evals, plan);
    out.normalized = Some(normalized);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocation::{optimal_allocation, CostModel};
    use crate::hierarchy::{
        ishigami_hierarchy, synthetic_field_hierarchy, InputDistribution, Model, ModelHierarchy,
    };
    use crate::pilot::PilotStats;
    use crate::sampling::{draw_inputs, evaluate_nested, evaluate_selected, OutputMatrix};

    fn manual_plan(m: Vec<usize>, alpha: Vec<f64>) -> AllocationPlan {
        let k = m.len();
        AllocationPlan {
            retained: m.iter().map(|&v| v > 0).collect(),
            alpha: alpha.into_iter().map(|a| vec![a]).collect(),
            m_real: vec![0.0; k],
            r: vec![0.0; k],
            costs: vec![1.0; k],
            budget: 0.0,
            budget_used: 0.0,
            predicted_mse: 0.0,
            m,
        }
    }

    fn evals(columns: Vec<Vec<f64>>) -> NestedEvaluations {
        let k = columns.len();
        NestedEvaluations::from_outputs(
            (0..k).collect(),
            vec![1.0; k],
            columns
                .into_iter()
                .map(|c| vec![OutputMatrix::from_column(c)])
                .collect(),
            1,
        )
        .unwrap()
    }

    #[test]
    fn hand_example() {
        let ev = evals(vec![vec![2.0], vec![1.0, 3.0]]);
        let r = mfmc_expectation(&ev, &manual_plan(vec![1, 2], vec![1.0, 1.0])).unwrap();
        assert_eq!(r.values, vec![3.0]);
        assert_eq!(r.realized_cost, 3.0);
    }

    #[test]
    fn zero_weights_give_plain_monte_carlo() {
        let h = ishigami_hierarchy();
        let s = draw_inputs(&h, 50, 3).unwrap();
        let ev = evaluate_nested(&h, &s, &[10, 20, 50]).unwrap();
        let r = mfmc_expectation(&ev, &manual_plan(vec![10, 20, 50], vec![1.0, 0.0, 0.0])).unwrap();
        assert_eq!(r.values, ev.outputs(0).prefix_mean(10));
    }

    #[test]
    fn equal_counts_contribute_nothing() {
        let ev = evals(vec![vec![2.0, 4.0], vec![1.0, 3.0], vec![7.0, 8.0, 100.0]]);
        let a = mfmc_expectation(&ev, &manual_plan(vec![2, 2, 3], vec![1.0, 123.0, 0.0])).unwrap();
        assert_eq!(a.values, vec![3.0]);
    }

    #[test]
    fn plan_mismatch_is_reported() {
        let ev = evals(vec![vec![2.0], vec![1.0, 3.0]]);
        let err = mfmc_expectation(&ev, &manual_plan(vec![1, 3], vec![1.0, 1.0])).unwrap_err();
        assert!(matches!(err, MfmcError::PlanMismatch(_)));
        let err = mfmc_statistic(&ev, &manual_plan(vec![1, 2], vec![1.0, 1.0]), &Variance);
        assert!(matches!(err, Err(MfmcError::TooFewSamples { .. })));
    }

    #[test]
    fn expectation_plugin_matches_and_single_model_reduces() {
        let h = ishigami_hierarchy();
        let s = draw_inputs(&h, 400, 8).unwrap();
        let ev = evaluate_nested(&h, &s, &[20, 100, 400]).unwrap();
        let plan = manual_plan(vec![20, 100, 400], vec![1.0, 0.7, 0.4]);
        let a = mfmc_expectation(&ev, &plan).unwrap();
        let b = mfmc_statistic(&ev, &plan, &Expectation).unwrap();
        assert_eq!(a.values, b.values);

        let h1 = h.subset(&[0]).unwrap();
        let ev1 = evaluate_nested(&h1, &s, &[20]).unwrap();
        let v = mfmc_statistic(&ev1, &manual_plan(vec![20], vec![1.0]), &Variance).unwrap();
        assert_eq!(v.values[0], single_level_variance(&ev1.outputs(0).column_prefix(0, 20)).unwrap());
    }

    #[test]
    fn identity_bridge_matches_linear_estimator() {
        let h = ishigami_hierarchy();
        let s = draw_inputs(&h, 300, 2).unwrap();
        let ev = evaluate_nested(&h, &s, &[10, 60, 300]).unwrap();
        let plan = manual_plan(vec![10, 60, 300], vec![1.0, 0.9, 0.8]);
        let lin = mfmc_expectation(&ev, &plan).unwrap();
        let non = mfmc_nonlinear(&ev, &plan, &RegressionBridge::identity(3)).unwrap();
        assert_eq!(lin.values, non.values);
        assert_eq!(non.mode, EstimatorMode::Nonlinear);
    }

    #[test]
    fn permutation_within_prefix_is_harmless() {
        let h = ishigami_hierarchy();
        let s = draw_inputs(&h, 60, 4).unwrap();
        let ev = evaluate_nested(&h, &s, &[6, 20, 60]).unwrap();
        let plan = manual_plan(vec![6, 20, 60], vec![1.0, 0.9, 0.8]);
        let base = mfmc_statistic(&ev, &plan, &Variance).unwrap().values[0];
        // reverse the rows inside every prefix segment
        let mut perm: Vec<usize> = (0..60).collect();
        perm[..6].reverse();
        perm[6..20].reverse();
        perm[20..].reverse();
        let permuted: Vec<Vec<f64>> = (0..3)
            .map(|k| {
                let col = ev.outputs(k).column_prefix(0, ev.counts()[k]);
                perm[..col.len()].iter().map(|&i| col[i]).collect()
            })
            .collect();
        let got = mfmc_statistic(&evals(permuted), &plan, &Variance).unwrap().values[0];
        assert!((got - base).abs() <= 1e-10 * base.abs());
    }

    #[test]
    fn synthetic_field_unbiased_with_exact_moments() {
        let n_points = 4;
        let h = synthetic_field_hierarchy(n_points).unwrap();
        let m = crate::hierarchy::synthetic_field_moments(n_points);
        let stats = PilotStats::exact(m.sigma.clone(), m.rho.clone()).unwrap();
        let plan = optimal_allocation(&stats, &CostModel::new(h.costs()).unwrap(), 30.0).unwrap();
        let reps = 400;
        let mut sums = vec![0.0; n_points];
        let mut sq = vec![0.0; n_points];
        for r in 0..reps {
            let s = draw_inputs(&h, *plan.m.iter().max().unwrap(), r).unwrap();
            let ev = evaluate_selected(&h, &[&s], &plan.m, None).unwrap();
            let est = mfmc_expectation(&ev, &plan).unwrap();
            for j in 0..n_points {
                sums[j] += est.values[j];
                sq[j] += est.values[j].powi(2);
            }
        }
        for j in 0..n_points {
            let mu = sums[j] / reps as f64;
            let sd = (sq[j] / reps as f64 - mu * mu).sqrt();
            assert!(mu.abs() < 4.0 * sd / (reps as f64).sqrt(), "point {j}: {mu}");
        }
    }

    #[test]
    fn sobol_normalization_uses_pooled_variance() {
        let h = ModelHierarchy::new(
            "lin",
            vec![InputDistribution::Normal { mean: 0.0, std_dev: 1.0 }; 2],
            1,
            vec![
                Model::scalar("hf", 1.0, |z| 2.0 * z[0] + z[1]),
                Model::scalar("lf", 0.1, |z| 2.0 * z[0]),
            ],
        )
        .unwrap();
        let block = crate::sampling::build_sobol_block(&h, 2000, 5).unwrap();
        let ev = crate::sampling::evaluate_nested_sobol(&h, &block, &[2000, 2000]).unwrap();
        let plan = manual_plan(vec![2000, 2000], vec![1.0, 0.5])
            .with_alpha(vec![vec![1.0, 1.0], vec![0.5, 0.5]]);
        let r = mfmc_sobol(&ev, &plan, &SobolIndices::main(), vec![vec![1.0], vec![0.3]], None)
            .unwrap();
        let norm = r.normalized.unwrap();
        assert!((norm[0] - 0.8).abs() < 0.1, "{norm:?}");
        assert!((norm[1] - 0.2).abs() < 0.1, "{norm:?}");
    }
}
