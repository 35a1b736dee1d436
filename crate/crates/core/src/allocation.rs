//! Budget-constrained optimal allocation of samples across the hierarchy.
//!
//! Given per-component standard deviations and high-fidelity correlations,
//! the control-variate weights are `alpha_i = rho_i sigma_1 / sigma_i` and
//! the sample counts grow from the high-fidelity model as
//! `m_i = m_1 r_i` with
//!
//! ```text
//! r_i = sqrt( w_1 (rho_i^2 - rho_{i+1}^2) / (w_i (1 - rho_2^2)) ),   rho_{K+1} = 0
//! m_1 = B / sum_i w_i r_i
//! ```
//!
//! Vector-valued outputs are handled through the integrated error, which
//! replaces `sigma_1^2` and `rho_i^2` by their `|Omega_j|`-weighted
//! aggregates. Models are first filtered to an admissible subset on which
//! these formulas give real, nondecreasing counts.

use serde::{Deserialize, Serialize};

use crate::error::{MfmcError, Result};
use crate::pilot::PilotStats;

/// Largest hierarchy for which every admissible subset is enumerated.
const EXHAUSTIVE_SUBSET_LIMIT: usize = 12;

/// Per-evaluation model costs `w_i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    w: Vec<f64>,
}

impl CostModel {
    pub fn new(w: Vec<f64>) -> Result<Self> {
        if w.is_empty() || w.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(MfmcError::InvalidInput(
                "costs must be positive and finite".into(),
            ));
        }
        Ok(Self { w })
    }

    pub fn w(&self) -> &[f64] {
        &self.w
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Every cost multiplied by `factor` (e.g. evaluations per sample).
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            w: self.w.iter().map(|c| c * factor).collect(),
        }
    }

    /// Cost of evaluating model `i` on `m_i` samples.
    pub fn total(&self, m: &[usize]) -> f64 {
        self.w.iter().zip(m).map(|(w, &m)| w * m as f64).sum()
    }
}

/// Integrated-error aggregates `sigma_bar_1^2` and `rho_bar_{1,i}^2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedStats {
    pub sigma_bar_sq: f64,
    pub rho_bar_sq: Vec<f64>,
    pub weights: Vec<f64>,
}

impl AggregatedStats {
    pub fn num_models(&self) -> usize {
        self.rho_bar_sq.len()
    }
}

/// `sigma_bar^2 = sum_j sigma_1^2(x_j) |Omega_j|` and
/// `rho_bar_i^2 = sum_j rho_i^2(x_j) sigma_1^2(x_j) |Omega_j| / sigma_bar^2`,
/// skipping degenerate components.
pub fn aggregate_vector_stats(stats: &PilotStats, weights: &[f64]) -> Result<AggregatedStats> {
    let n_comp = stats.num_components();
    if weights.len() != n_comp || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
        return Err(MfmcError::InvalidInput(format!(
            "need {n_comp} positive output weights, got {weights:?}"
        )));
    }
    let live: Vec<usize> = (0..n_comp).filter(|&j| !stats.degenerate[j]).collect();
    let contrib: Vec<f64> = live
        .iter()
        .map(|&j| stats.sigma[0][j].powi(2) * weights[j])
        .collect();
    let sigma_bar_sq: f64 = contrib.iter().sum();
    if live.is_empty() || sigma_bar_sq <= 0.0 {
        return Err(MfmcError::NoVariance);
    }
    let rho_bar_sq = (0..stats.num_models())
        .map(|i| {
            if i == 0 {
                return 1.0;
            }
            let s: f64 = live
                .iter()
                .zip(&contrib)
                .map(|(&j, c)| stats.rho[i][j].powi(2) * (c / sigma_bar_sq))
                .sum();
            s.clamp(0.0, 1.0)
        })
        .collect();
    Ok(AggregatedStats {
        sigma_bar_sq,
        rho_bar_sq,
        weights: weights.to_vec(),
    })
}

/// Optimal control-variate weights `alpha[i][j] = rho_i(x_j) sigma_1(x_j) / sigma_i(x_j)`;
/// 1 for the high-fidelity model and 0 where undefined.
pub fn optimal_alpha(stats: &PilotStats) -> Vec<Vec<f64>> {
    (0..stats.num_models())
        .map(|i| {
            (0..stats.num_components())
                .map(|j| {
                    if i == 0 {
                        1.0
                    } else if stats.degenerate[j] || stats.sigma[i][j] == 0.0 {
                        0.0
                    } else {
                        stats.rho[i][j] * stats.sigma[0][j] / stats.sigma[i][j]
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationPlan {
    /// Samples per model; 0 for dropped models.
    pub m: Vec<usize>,
    /// `[model][component]`; row 0 is all ones, dropped rows are zero.
    pub alpha: Vec<Vec<f64>>,
    pub retained: Vec<bool>,
    /// Real-valued optimum before rounding (0 for dropped models).
    pub m_real: Vec<f64>,
    /// Count ratios `m_i / m_1` of the real optimum.
    pub r: Vec<f64>,
    /// Costs the plan was computed with.
    pub costs: Vec<f64>,
    pub budget: f64,
    pub budget_used: f64,
    pub predicted_mse: f64,
}

impl AllocationPlan {
    pub fn num_models(&self) -> usize {
        self.m.len()
    }

    pub fn retained_indices(&self) -> Vec<usize> {
        (0..self.m.len()).filter(|&i| self.retained[i]).collect()
    }

    /// Counts of the retained models, in order.
    pub fn retained_counts(&self) -> Vec<usize> {
        self.retained_indices().iter().map(|&i| self.m[i]).collect()
    }

    /// Same counts with different weights, e.g. for a second statistic
    /// evaluated on the same samples. Dropped models keep zero weights.
    pub fn with_alpha(&self, mut alpha: Vec<Vec<f64>>) -> Self {
        for (i, row) in alpha.iter_mut().enumerate() {
            if !self.retained[i] {
                row.iter_mut().for_each(|a| *a = 0.0);
            }
        }
        Self {
            alpha,
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[derive(Debug, Clone, Default)]
pub struct AllocationOptions {
    /// `|Omega_j|`; all ones when `None`.
    pub weights: Option<Vec<f64>>,
    /// Lower bound on `m_1` (a statistic may need more than one sample).
    pub min_samples: usize,
}

/// Whether `subset` (indices into `rho_sq`, starting with 0) satisfies the
/// ordering and cost conditions.
fn is_admissible(subset: &[usize], rho_sq: &[f64], w: &[f64]) -> bool {
    let rho = |k: usize| subset.get(k).map_or(0.0, |&i| rho_sq[i]);
    for k in 1..subset.len() {
        if !(rho(k) < rho(k - 1) && rho(k) > 0.0) {
            return false;
        }
    }
    for k in 1..subset.len() {
        let lhs = w[subset[k - 1]] / w[subset[k]];
        let rhs = (rho(k - 1) - rho(k)) / (rho(k) - rho(k + 1));
        if !(lhs > rhs) {
            return false;
        }
    }
    true
}

/// `(sum_i sqrt(w_i / w_1 (rho_i^2 - rho_{i+1}^2)))^2` over `subset`.
fn ratio_on(subset: &[usize], rho_sq: &[f64], w: &[f64]) -> f64 {
    let w1 = w[subset[0]];
    let s: f64 = (0..subset.len())
        .map(|k| {
            let next = subset.get(k + 1).map_or(0.0, |&i| rho_sq[i]);
            ((w[subset[k]] / w1) * (rho_sq[subset[k]] - next).max(0.0)).sqrt()
        })
        .sum();
    s * s
}

/// The admissible subset of models (always containing model 0) with the
/// smallest variance-reduction ratio.
pub fn admissible_subset(rho_sq: &[f64], w: &[f64]) -> Vec<usize> {
    let k = rho_sq.len();
    if k <= EXHAUSTIVE_SUBSET_LIMIT {
        let mut best = vec![0];
        let mut best_ratio = 1.0;
        for mask in 0u32..(1 << (k - 1)) {
            let subset: Vec<usize> = std::iter::once(0)
                .chain((1..k).filter(|i| mask & (1 << (i - 1)) != 0))
                .collect();
            if subset.len() > 1 && is_admissible(&subset, rho_sq, w) {
                let ratio = ratio_on(&subset, rho_sq, w);
                if ratio < best_ratio {
                    best_ratio = ratio;
                    best = subset;
                }
            }
        }
        return best;
    }
    // Large hierarchies: drop offending models one at a time.
    let mut subset: Vec<usize> = (0..k).collect();
    loop {
        let order_violation = (1..subset.len()).find(|&p| {
            let (prev, cur) = (rho_sq[subset[p - 1]], rho_sq[subset[p]]);
            !(cur < prev && cur > 0.0)
        });
        if let Some(p) = order_violation {
            // of two models with equal correlation keep the cheaper one
            let (a, b) = (subset[p - 1], subset[p]);
            let drop = if p > 1 && rho_sq[a] == rho_sq[b] && w[a] > w[b] {
                p - 1
            } else {
                p
            };
            subset.remove(drop);
            continue;
        }
        let cost_violation = (1..subset.len()).find(|&p| !is_admissible(&subset[..=p], rho_sq, w));
        match cost_violation {
            Some(p) => {
                subset.remove(p);
            }
            None => return subset,
        }
    }
}

/// Variance-reduction ratio of the optimal estimator relative to plain Monte
/// Carlo at equal budget, evaluated on the models in the given order.
pub fn variance_reduction_ratio(agg: &AggregatedStats, costs: &CostModel) -> f64 {
    let all: Vec<usize> = (0..agg.num_models()).collect();
    ratio_on(&all, &agg.rho_bar_sq, costs.w())
}

/// Budget at which the optimal estimator reaches an integrated mean
/// squared error of `epsilon^2`.
pub fn budget_for_tolerance(agg: &AggregatedStats, costs: &CostModel, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(MfmcError::InvalidInput("tolerance must be positive".into()));
    }
    if costs.len() != agg.num_models() {
        return Err(MfmcError::InvalidInput("one cost per model is required".into()));
    }
    let subset = admissible_subset(&agg.rho_bar_sq, costs.w());
    let w1 = costs.w()[0];
    Ok(w1 * agg.sigma_bar_sq / (epsilon * epsilon) * ratio_on(&subset, &agg.rho_bar_sq, costs.w()))
}

/// Mean squared error of the estimator for the plan's counts and weights.
///
/// Per component `j`:
/// `sigma_1^2 / m_1 + sum_i (1/m_{i-1} - 1/m_i)(alpha_i^2 sigma_i^2 - 2 alpha_i rho_i sigma_1 sigma_i)`
/// where `i - 1` is the previous retained model; components are combined
/// with the weights `|Omega_j|`.
pub fn predicted_mse(plan: &AllocationPlan, stats: &PilotStats, weights: &[f64]) -> Result<f64> {
    let idx = plan.retained_indices();
    if idx.first() != Some(&0) || plan.m[0] == 0 {
        return Err(MfmcError::InvalidAllocation(plan.m.clone()));
    }
    if stats.num_models() != plan.num_models() || weights.len() != stats.num_components() {
        return Err(MfmcError::PlanMismatch(
            "plan, statistics and weights disagree in size".into(),
        ));
    }
    let mut total = 0.0;
    for j in 0..stats.num_components() {
        if stats.degenerate[j] {
            continue;
        }
        let s1 = stats.sigma[0][j];
        let mut mse = s1 * s1 / plan.m[0] as f64;
        for p in 1..idx.len() {
            let (i, prev) = (idx[p], idx[p - 1]);
            let a = plan.alpha[i][j];
            let si = stats.sigma[i][j];
            let gap = 1.0 / plan.m[prev] as f64 - 1.0 / plan.m[i] as f64;
            mse += gap * (a * a * si * si - 2.0 * a * stats.rho[i][j] * s1 * si);
        }
        total += weights[j] * mse;
    }
    Ok(total)
}

/// Integrated MSE at the optimal weights for counts `m` (zeros for dropped
/// models): `sigma_bar^2 (1/m_1 - sum_i (1/m_{i-1} - 1/m_i) rho_bar_i^2)`.
pub fn predicted_mse_aggregated(m: &[usize], agg: &AggregatedStats) -> Result<f64> {
    let idx: Vec<usize> = (0..m.len()).filter(|&i| m[i] > 0).collect();
    if idx.first() != Some(&0) {
        return Err(MfmcError::InvalidAllocation(m.to_vec()));
    }
    let mut inv = 1.0 / m[0] as f64;
    for p in 1..idx.len() {
        let gap = 1.0 / m[idx[p - 1]] as f64 - 1.0 / m[idx[p]] as f64;
        inv -= gap * agg.rho_bar_sq[idx[p]];
    }
    Ok(agg.sigma_bar_sq * inv)
}

/// Real-valued ratios `r` and `m_1` on the subset.
fn real_optimum(subset: &[usize], rho_sq: &[f64], w: &[f64], budget: f64) -> (Vec<f64>, f64) {
    let rho = |k: usize| subset.get(k).map_or(0.0, |&i| rho_sq[i]);
    let w1 = w[subset[0]];
    let denom = 1.0 - rho(1);
    let r: Vec<f64> = (0..subset.len())
        .map(|k| {
            if k == 0 {
                1.0
            } else {
                (w1 * (rho(k) - rho(k + 1)) / (w[subset[k]] * denom)).sqrt()
            }
        })
        .collect();
    let unit: f64 = subset.iter().zip(&r).map(|(&i, r)| w[i] * r).sum();
    (r.clone(), budget / unit)
}

/// Floor the real counts, enforce `m_1 >= min_samples` and monotonicity,
/// trim to the budget, then spend what is left on the cheapest model that
/// can grow. Returns `None` if even `min_samples` of every model exceed the
/// budget.
fn round_counts(real: &[f64], w: &[f64], budget: f64, min_samples: usize) -> Option<Vec<usize>> {
    let k = real.len();
    let mut m: Vec<usize> = real.iter().map(|v| v.floor().max(0.0) as usize).collect();
    m[0] = m[0].max(min_samples);
    for i in 1..k {
        m[i] = m[i].max(m[i - 1]);
    }
    let cost = |m: &[usize]| -> f64 { w.iter().zip(m).map(|(w, &m)| w * m as f64).sum() };
    for i in (1..k).rev() {
        let excess = cost(&m) - budget;
        if excess <= 0.0 {
            break;
        }
        let cut = ((excess / w[i]).ceil() as usize).min(m[i] - m[i - 1]);
        m[i] -= cut;
    }
    if cost(&m) > budget {
        // lower the shared floor as far as min_samples allows
        let per_sample: f64 = w.iter().sum();
        let floor = ((budget / per_sample).floor() as usize).max(min_samples);
        m.iter_mut().for_each(|v| *v = (*v).min(floor));
        if cost(&m) > budget {
            return None;
        }
    }
    let mut full = vec![false; k];
    loop {
        let left = budget - cost(&m);
        let pick = (0..k)
            .filter(|&i| !full[i] && w[i] <= left && (i + 1 == k || m[i] < m[i + 1]))
            .min_by(|&a, &b| w[a].total_cmp(&w[b]).then(b.cmp(&a)));
        let Some(i) = pick else { break };
        // grow the last model in one step, others one at a time
        let step = if i + 1 == k {
            (left / w[i]).floor().max(1.0) as usize
        } else {
            1
        };
        m[i] += step;
        while m[i] > 0 && cost(&m) > budget {
            m[i] -= 1;
            full[i] = true;
        }
    }
    Some(m)
}

pub fn optimal_allocation(stats: &PilotStats, costs: &CostModel, budget: f64) -> Result<AllocationPlan> {
    optimal_allocation_with(stats, costs, budget, &AllocationOptions::default())
}

pub fn optimal_allocation_with(
    stats: &PilotStats,
    costs: &CostModel,
    budget: f64,
    options: &AllocationOptions,
) -> Result<AllocationPlan> {
    let k = stats.num_models();
    if costs.len() != k {
        return Err(MfmcError::InvalidInput(format!(
            "{} costs for {k} models",
            costs.len()
        )));
    }
    let w = costs.w();
    let min_samples = options.min_samples.max(1);
    if !(budget.is_finite() && budget >= w[0] * min_samples as f64) {
        return Err(MfmcError::InfeasibleBudget {
            budget,
            cost: w[0] * min_samples as f64,
        });
    }
    let ones = vec![1.0; stats.num_components()];
    let weights = options.weights.as_deref().unwrap_or(&ones);
    let agg = aggregate_vector_stats(stats, weights)?;
    let mut subset = admissible_subset(&agg.rho_bar_sq, w);

    let (m_sub, r, m1) = loop {
        let (r, m1) = real_optimum(&subset, &agg.rho_bar_sq, w, budget);
        let real: Vec<f64> = r.iter().map(|r| m1 * r).collect();
        let w_sub: Vec<f64> = subset.iter().map(|&i| w[i]).collect();
        match round_counts(&real, &w_sub, budget, min_samples) {
            Some(m) => break (m, r, m1),
            None => {
                // cannot afford min_samples of every retained model
                subset.pop();
            }
        }
    };

    let mut m = vec![0; k];
    let mut m_real = vec![0.0; k];
    let mut r_full = vec![0.0; k];
    let mut retained = vec![false; k];
    for (p, &i) in subset.iter().enumerate() {
        m[i] = m_sub[p];
        m_real[i] = m1 * r[p];
        r_full[i] = r[p];
        retained[i] = true;
    }
    let mut alpha = optimal_alpha(stats);
    for (i, row) in alpha.iter_mut().enumerate() {
        if !retained[i] {
            row.iter_mut().for_each(|a| *a = 0.0);
        }
    }
    let mut plan = AllocationPlan {
        budget_used: costs.total(&m),
        m,
        alpha,
        retained,
        m_real,
        r: r_full,
        costs: w.to_vec(),
        budget,
        predicted_mse: 0.0,
    };
    plan.predicted_mse = predicted_mse(&plan, stats, weights)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol * b.abs().max(1.0)
    }

    #[test]
    fn aggregation_hand_example() {
        let stats = PilotStats::exact(
            vec![vec![1.0, 3f64.sqrt()], vec![1.0, 1.0]],
            vec![vec![1.0, 1.0], vec![0.9f64.sqrt(), 0.5f64.sqrt()]],
        )
        .unwrap();
        let agg = aggregate_vector_stats(&stats, &[1.0, 1.0]).unwrap();
        assert!(close(agg.sigma_bar_sq, 4.0, 1e-14));
        assert!(close(agg.rho_bar_sq[1], 0.6, 1e-14));
    }

    #[test]
    fn scalar_aggregation_is_exact() {
        let stats = PilotStats::scalar(&[1.7, 0.3], &[1.0, 0.37]).unwrap();
        let agg = aggregate_vector_stats(&stats, &[1.0]).unwrap();
        assert_eq!(agg.sigma_bar_sq, 1.7 * 1.7);
        assert_eq!(agg.rho_bar_sq[1], 0.37 * 0.37);
    }

    #[test]
    fn all_degenerate_components_fail() {
        let stats = PilotStats::scalar(&[0.0, 1.0], &[1.0, 0.5]).unwrap();
        assert!(matches!(
            aggregate_vector_stats(&stats, &[1.0]),
            Err(MfmcError::NoVariance)
        ));
    }

    #[test]
    fn two_model_hand_example() {
        let stats = PilotStats::scalar(&[2.0, 2.0], &[1.0, 0.9]).unwrap();
        let costs = CostModel::new(vec![1.0, 0.01]).unwrap();
        let plan = optimal_allocation(&stats, &costs, 100.0).unwrap();
        let r2 = (0.81f64 / (0.01 * 0.19)).sqrt();
        assert!(close(plan.r[1], r2, 1e-12));
        assert!(close(r2, 20.647, 1e-4));
        let m1 = 100.0 / (1.0 + 0.01 * r2);
        assert!(close(plan.m_real[0], m1, 1e-12));
        assert!((plan.m_real[0] - 82.9).abs() < 0.05);
        assert!((plan.m_real[1] - 1711.5).abs() < 0.5);
        assert!(close(plan.alpha[1][0], 0.9, 1e-15));
        assert!(plan.budget_used <= 100.0);
        assert!(plan.m[0] >= 82 && plan.m[1] >= plan.m[0]);
    }

    #[test]
    fn single_model_is_plain_monte_carlo() {
        let stats = PilotStats::scalar(&[2.0], &[1.0]).unwrap();
        let costs = CostModel::new(vec![3.0]).unwrap();
        let plan = optimal_allocation(&stats, &costs, 100.0).unwrap();
        assert_eq!(plan.m, vec![33]);
        assert!(close(plan.predicted_mse, 4.0 / 33.0, 1e-15));
        assert!(matches!(
            optimal_allocation(&stats, &costs, 2.0),
            Err(MfmcError::InfeasibleBudget { .. })
        ));
    }

    fn plan_with(m: Vec<usize>, alpha2: f64) -> AllocationPlan {
        AllocationPlan {
            m,
            alpha: vec![vec![1.0], vec![alpha2]],
            retained: vec![true, true],
            m_real: vec![0.0; 2],
            r: vec![0.0; 2],
            costs: vec![1.0, 0.01],
            budget: 0.0,
            budget_used: 0.0,
            predicted_mse: 0.0,
        }
    }

    #[test]
    fn predicted_mse_hand_examples() {
        let stats = PilotStats::scalar(&[2.0], &[1.0]).unwrap();
        let mut plan = plan_with(vec![10], 0.0);
        plan.alpha.truncate(1);
        plan.retained.truncate(1);
        assert!(close(predicted_mse(&plan, &stats, &[1.0]).unwrap(), 0.4, 1e-15));

        let stats = PilotStats::scalar(&[2.0, 2.0], &[1.0, 0.9]).unwrap();
        let got = predicted_mse(&plan_with(vec![10, 100], 0.9), &stats, &[1.0]).unwrap();
        assert!(close(got, 0.1084, 1e-12), "{got}");
        let got = predicted_mse(&plan_with(vec![10, 100], 0.5), &stats, &[1.0]).unwrap();
        assert!(close(got, 0.166, 1e-12), "{got}");
        assert!(predicted_mse(&plan_with(vec![0, 100], 0.5), &stats, &[1.0]).is_err());
    }

    #[test]
    fn variance_reduction_examples() {
        let agg = |r: f64| AggregatedStats {
            sigma_bar_sq: 1.0,
            rho_bar_sq: vec![1.0, r * r],
            weights: vec![1.0],
        };
        let one = AggregatedStats {
            sigma_bar_sq: 1.0,
            rho_bar_sq: vec![1.0],
            weights: vec![1.0],
        };
        assert_eq!(variance_reduction_ratio(&one, &CostModel::new(vec![1.0]).unwrap()), 1.0);
        let cheap = CostModel::new(vec![1.0, 0.01]).unwrap();
        let expected = (0.0975f64.sqrt() + 0.009025f64.sqrt()).powi(2);
        assert!(close(variance_reduction_ratio(&agg(0.95), &cheap), expected, 1e-14));
        assert!((expected - 0.1658).abs() < 1e-4);
        // an equally expensive model: 1 + 2 rho sqrt(1 - rho^2), back to 1
        // as the correlation vanishes and largest (2) at rho^2 = 1/2
        let same = CostModel::new(vec![1.0, 1.0]).unwrap();
        let r = 0.1;
        let got = variance_reduction_ratio(&agg(r), &same);
        assert!(close(got, 1.0 + 2.0 * r * (1.0 - r * r).sqrt(), 1e-14));
        assert!(close(variance_reduction_ratio(&agg(1e-9), &same), 1.0, 1e-8));
        assert!(close(variance_reduction_ratio(&agg(0.5f64.sqrt()), &same), 2.0, 1e-14));
    }

    #[test]
    fn inadmissible_model_is_dropped() {
        // equally expensive and weakly correlated: plain MC is better
        let stats = PilotStats::scalar(&[1.0, 1.0], &[1.0, 0.1]).unwrap();
        let costs = CostModel::new(vec![1.0, 1.0]).unwrap();
        let plan = optimal_allocation(&stats, &costs, 50.0).unwrap();
        assert_eq!(plan.m, vec![50, 0]);
        assert_eq!(plan.retained, vec![true, false]);
        assert_eq!(plan.alpha[1], vec![0.0]);
    }

    #[test]
    fn equal_correlation_keeps_cheaper_model() {
        let rho_sq = [1.0, 0.8, 0.8];
        assert_eq!(admissible_subset(&rho_sq, &[1.0, 0.1, 0.01]), vec![0, 2]);
        assert_eq!(admissible_subset(&rho_sq, &[1.0, 0.01, 0.1]), vec![0, 1]);
    }

    #[test]
    fn interior_model_can_be_dropped() {
        // model 2 is barely better correlated than model 3 but far more
        // expensive
        let rho_sq = [1.0, 0.95, 0.949];
        let w = [1.0, 0.5, 0.001];
        assert_eq!(admissible_subset(&rho_sq, &w), vec![0, 2]);
        let stats =
            PilotStats::scalar(&[1.0, 1.0, 1.0], &[1.0, 0.95f64.sqrt(), 0.949f64.sqrt()]).unwrap();
        let plan = optimal_allocation(&stats, &CostModel::new(w.to_vec()).unwrap(), 40.0).unwrap();
        assert_eq!(plan.m[1], 0);
        assert!(plan.m[2] > plan.m[0]);
        assert_eq!(plan.retained_indices(), vec![0, 2]);
    }

    #[test]
    fn tolerance_budget_single_model() {
        let agg = AggregatedStats {
            sigma_bar_sq: 4.0,
            rho_bar_sq: vec![1.0],
            weights: vec![1.0],
        };
        let b = budget_for_tolerance(&agg, &CostModel::new(vec![1.0]).unwrap(), 0.2).unwrap();
        assert!(close(b, 100.0, 1e-12));
        let b = budget_for_tolerance(&agg, &CostModel::new(vec![5.0]).unwrap(), 0.2).unwrap();
        assert!(close(b, 500.0, 1e-12));
    }

    #[test]
    fn vector_plan_with_one_component_equals_scalar_plan() {
        let stats = PilotStats::scalar(&[3.0, 2.0, 1.0], &[1.0, 0.95, 0.8]).unwrap();
        let costs = CostModel::new(vec![1.0, 0.05, 0.001]).unwrap();
        let scalar = optimal_allocation(&stats, &costs, 160.0).unwrap();
        let options = AllocationOptions {
            weights: Some(vec![1.0]),
            min_samples: 1,
        };
        let vector = optimal_allocation_with(&stats, &costs, 160.0, &options).unwrap();
        assert_eq!(scalar, vector);
    }

    #[test]
    fn rounding_respects_budget_and_min_samples() {
        let stats = PilotStats::scalar(&[1.0, 1.0, 1.0], &[1.0, 0.99, 0.9]).unwrap();
        let costs = CostModel::new(vec![1.0, 0.05, 0.001]).unwrap();
        for budget in [1.0, 1.5, 2.0, 2.2, 3.0, 7.7, 40.0] {
            let options = AllocationOptions {
                weights: None,
                min_samples: 2,
            };
            match optimal_allocation_with(&stats, &costs, budget, &options) {
                Ok(plan) => {
                    assert!(plan.budget_used <= budget + 1e-12, "{budget}: {plan:?}");
                    assert!(plan.m[0] >= 2);
                    let kept = plan.retained_counts();
                    assert!(kept.windows(2).all(|p| p[0] <= p[1]));
                }
                Err(e) => {
                    assert!(budget < 2.0, "{budget}: {e}");
                }
            }
        }
    }
}
