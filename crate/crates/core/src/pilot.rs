//! Pilot estimation of the standard deviations and high-fidelity
//! correlations that drive the allocation.

use serde::{Deserialize, Serialize};

use crate::error::{MfmcError, Result};
use crate::estimators::{BlockLayout, Expectation, Statistic};
use crate::hierarchy::ModelHierarchy;
use crate::numerics::{sample_covariance, sample_variance};
use crate::regression::RegressionBridge;
use crate::sampling::{
    draw_inputs_on_stream, evaluate_models_on_blocks, stream_id, EvalCache, NestedEvaluations,
    Purpose, SobolSampleBlock,
};

/// Smallest pilot that gives a usable correlation estimate.
pub const MIN_PILOT_SIZE: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StatsKind {
    Raw,
    QTransformed,
    GTransformed,
}

/// Per-model, per-component standard deviations `sigma[i][j]` and
/// correlations with the high-fidelity model `rho[i][j]`.
///
/// Components whose high-fidelity deviation is zero are flagged in
/// `degenerate`; their correlations are stored as 0 and reported as
/// undefined by [`PilotStats::rho_at`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotStats {
    pub kind: StatsKind,
    pub statistic: String,
    pub n: usize,
    pub sigma: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
    pub degenerate: Vec<bool>,
}

impl PilotStats {
    /// Stats from known moments, e.g. closed-form values.
    pub fn exact(sigma: Vec<Vec<f64>>, rho: Vec<Vec<f64>>) -> Result<Self> {
        let stats = Self::assemble(StatsKind::Raw, "exact", 0, sigma, rho);
        stats.validate()?;
        Ok(stats)
    }

    /// Scalar-output stats: one component per model.
    pub fn scalar(sigma: &[f64], rho: &[f64]) -> Result<Self> {
        Self::exact(
            sigma.iter().map(|&s| vec![s]).collect(),
            rho.iter().map(|&r| vec![r]).collect(),
        )
    }

    fn assemble(
        kind: StatsKind,
        statistic: &str,
        n: usize,
        sigma: Vec<Vec<f64>>,
        mut rho: Vec<Vec<f64>>,
    ) -> Self {
        let n_comp = sigma.first().map_or(0, Vec::len);
        let degenerate: Vec<bool> = (0..n_comp).map(|j| sigma[0][j] == 0.0).collect();
        for (i, row) in rho.iter_mut().enumerate() {
            for (j, r) in row.iter_mut().enumerate() {
                *r = if i == 0 {
                    1.0
                } else if degenerate[j] || !r.is_finite() {
                    0.0
                } else {
                    r.clamp(-1.0, 1.0)
                };
            }
        }
        Self {
            kind,
            statistic: statistic.to_string(),
            n,
            sigma,
            rho,
            degenerate,
        }
    }

    /// Check shapes and ranges; used after deserialization as well.
    pub fn validate(&self) -> Result<()> {
        let k = self.sigma.len();
        if k == 0 || self.rho.len() != k {
            return Err(MfmcError::InvalidInput(
                "sigma and rho need one row per model".into(),
            ));
        }
        let n_comp = self.sigma[0].len();
        if n_comp == 0
            || self.degenerate.len() != n_comp
            || self.sigma.iter().chain(&self.rho).any(|r| r.len() != n_comp)
        {
            return Err(MfmcError::InvalidInput("ragged pilot statistics".into()));
        }
        if self.sigma.iter().flatten().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(MfmcError::InvalidInput(
                "standard deviations must be finite and nonnegative".into(),
            ));
        }
        if self.rho.iter().flatten().any(|r| !(-1.0..=1.0).contains(r)) {
            return Err(MfmcError::InvalidInput("correlations must lie in [-1, 1]".into()));
        }
        Ok(())
    }

    pub fn num_models(&self) -> usize {
        self.sigma.len()
    }

    pub fn num_components(&self) -> usize {
        self.sigma[0].len()
    }

    /// `rho_{1,i}` at component `j`, or `None` for a degenerate component.
    pub fn rho_at(&self, model: usize, component: usize) -> Option<f64> {
        (!self.degenerate[component]).then(|| self.rho[model][component])
    }

    /// Keep only the listed models, in order.
    pub fn subset(&self, models: &[usize]) -> Self {
        Self {
            sigma: models.iter().map(|&i| self.sigma[i].clone()).collect(),
            rho: models.iter().map(|&i| self.rho[i].clone()).collect(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stats: Self = serde_json::from_str(text)?;
        stats.validate()?;
        Ok(stats)
    }
}

/// Sample standard deviation of each series and its correlation with the
/// first one.
fn moments(series: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let hf = &series[0];
    let sd_hf = sample_variance(hf).max(0.0).sqrt();
    let mut sigma = Vec::with_capacity(series.len());
    let mut rho = Vec::with_capacity(series.len());
    for s in series {
        let sd = sample_variance(s).max(0.0).sqrt();
        let cov = sample_covariance(hf, s);
        sigma.push(sd);
        rho.push(if sd > 0.0 && sd_hf > 0.0 {
            cov / (sd_hf * sd)
        } else {
            0.0
        });
    }
    (sigma, rho)
}

fn check_pilot(evals: &NestedEvaluations, n: usize) -> Result<()> {
    if n < MIN_PILOT_SIZE {
        return Err(MfmcError::TooFewSamples {
            required: MIN_PILOT_SIZE,
            actual: n,
        });
    }
    if let Some(&short) = evals.counts().iter().find(|&&m| m < n) {
        return Err(MfmcError::TooFewSamples {
            required: n,
            actual: short,
        });
    }
    Ok(())
}

fn transformed_stats(
    evals: &NestedEvaluations,
    stat: &dyn Statistic,
    n: usize,
    kind: StatsKind,
) -> Result<PilotStats> {
    check_pilot(evals, n)?;
    let blocks_needed = stat.layout().num_blocks(evals.input_dim());
    if evals.num_blocks() < blocks_needed {
        return Err(MfmcError::InvalidInput(format!(
            "{} needs {blocks_needed} input blocks, pilot has {}",
            stat.label(),
            evals.num_blocks()
        )));
    }
    // [model][component][row]
    let q: Vec<Vec<Vec<f64>>> = (0..evals.num_models())
        .map(|k| stat.contributions(&evals.model_outputs(k)[..blocks_needed], n))
        .collect();
    let n_comp = q[0].len();
    let mut sigma = vec![vec![0.0; n_comp]; q.len()];
    let mut rho = vec![vec![0.0; n_comp]; q.len()];
    for j in 0..n_comp {
        let series: Vec<Vec<f64>> = q.iter().map(|m| m[j].clone()).collect();
        let (s, r) = moments(&series);
        for k in 0..q.len() {
            sigma[k][j] = s[k];
            rho[k][j] = r[k];
        }
    }
    Ok(PilotStats::assemble(kind, stat.label(), n, sigma, rho))
}

/// Standard deviations and Pearson correlations of the raw outputs over the
/// first `n` pilot rows.
pub fn estimate_moment_stats(evals: &NestedEvaluations, n: usize) -> Result<PilotStats> {
    transformed_stats(evals, &Expectation, n, StatsKind::Raw)
}

/// Moments of the statistic's per-sample contributions.
pub fn estimate_q_stats(
    evals: &NestedEvaluations,
    stat: &dyn Statistic,
    n: usize,
) -> Result<PilotStats> {
    transformed_stats(evals, stat, n, StatsKind::QTransformed)
}

/// Moments after mapping every low-fidelity output through its regression
/// bridge. The high-fidelity series stays raw, so `sigma[0]` is the raw
/// deviation and `rho[i]` correlates raw high-fidelity values with the
/// bridged low-fidelity values.
pub fn estimate_g_stats(
    evals: &NestedEvaluations,
    bridge: &RegressionBridge,
    stat: &dyn Statistic,
    n: usize,
) -> Result<PilotStats> {
    check_pilot(evals, n)?;
    let mapped = bridge.apply_to(evals)?;
    transformed_stats(&mapped, stat, n, StatsKind::GTransformed)
}

/// Evaluate every model of the hierarchy on `n` pilot rows of replicate
/// `replicate`. With the Sobol layout the block holds `s`, `s'` and the
/// mixed sets; block 0 is the same plain pilot set in both layouts.
pub fn pilot_evaluations(
    hierarchy: &ModelHierarchy,
    layout: BlockLayout,
    n: usize,
    seed: u64,
    replicate: u64,
    cache: Option<&EvalCache>,
) -> Result<NestedEvaluations> {
    if n < MIN_PILOT_SIZE {
        return Err(MfmcError::TooFewSamples {
            required: MIN_PILOT_SIZE,
            actual: n,
        });
    }
    let dists = hierarchy.distributions();
    let base = draw_inputs_on_stream(dists, n, seed, stream_id(replicate, Purpose::Pilot));
    let models: Vec<usize> = (0..hierarchy.num_models()).collect();
    let counts = vec![n; models.len()];
    match layout {
        BlockLayout::Plain => evaluate_models_on_blocks(hierarchy, &[&base], &models, &counts, cache),
        BlockLayout::Sobol => {
            let second =
                draw_inputs_on_stream(dists, n, seed, stream_id(replicate, Purpose::PilotSecond));
            let block = SobolSampleBlock::from_sets(base, second)?;
            evaluate_models_on_blocks(hierarchy, &block.blocks(), &models, &counts, cache)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimators::Variance;
    use crate::hierarchy::{ishigami_hierarchy, synthetic_field_moments, synthetic_field_hierarchy};
    use crate::sampling::OutputMatrix;

    fn evals_from(columns: &[&[f64]]) -> NestedEvaluations {
        let outputs = columns
            .iter()
            .map(|c| vec![OutputMatrix::from_column(c.to_vec())])
            .collect();
        NestedEvaluations::from_outputs(
            (0..columns.len()).collect(),
            vec![1.0; columns.len()],
            outputs,
            1,
        )
        .unwrap()
    }

    #[test]
    fn hand_example_perfect_correlation() {
        let ev = evals_from(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]]);
        let s = estimate_moment_stats(&ev, 3).unwrap();
        assert!((s.rho[1][0] - 1.0).abs() < 1e-15);
        assert!((s.sigma[0][0] / s.sigma[1][0] - 0.5).abs() < 1e-15);
        assert_eq!(s.rho[0][0], 1.0);
    }

    #[test]
    fn identical_models() {
        let col = [0.3, -1.0, 2.5, 0.7];
        let ev = evals_from(&[&col, &col, &col]);
        let s = estimate_moment_stats(&ev, 4).unwrap();
        for i in 1..3 {
            assert!((s.rho[i][0] - 1.0).abs() < 1e-15);
            assert_eq!(s.sigma[i][0], s.sigma[0][0]);
        }
        let v = estimate_q_stats(&ev, &Variance, 4).unwrap();
        assert!((v.rho[2][0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn anticorrelated_roundoff_is_clamped() {
        let a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 1e8).collect();
        let b: Vec<f64> = a.iter().map(|v| -v).collect();
        let s = estimate_moment_stats(&evals_from(&[&a, &b]), 50).unwrap();
        assert!(s.rho[1][0] >= -1.0 && s.rho[1][0] <= -1.0 + 1e-12);
    }

    #[test]
    fn degenerate_component_is_flagged() {
        let ev = evals_from(&[&[2.0, 2.0, 2.0], &[1.0, 5.0, 3.0]]);
        let s = estimate_moment_stats(&ev, 3).unwrap();
        assert_eq!(s.degenerate, vec![true]);
        assert_eq!(s.rho_at(1, 0), None);
        let ev = evals_from(&[&[1.0, 5.0, 3.0], &[2.0, 2.0, 2.0]]);
        let s = estimate_moment_stats(&ev, 3).unwrap();
        assert_eq!(s.rho_at(1, 0), Some(0.0));
    }

    #[test]
    fn identity_q_matches_moment_stats() {
        let h = ishigami_hierarchy();
        let ev = pilot_evaluations(&h, BlockLayout::Plain, 64, 4, 0, None).unwrap();
        let a = estimate_moment_stats(&ev, 64).unwrap();
        let b = estimate_q_stats(&ev, &Expectation, 64).unwrap();
        assert_eq!(a.sigma, b.sigma);
        assert_eq!(a.rho, b.rho);
        assert_eq!(b.kind, StatsKind::QTransformed);
    }

    #[test]
    fn too_small_pilot_is_rejected() {
        let ev = evals_from(&[&[1.0, 2.0], &[1.0, 3.0]]);
        assert!(estimate_moment_stats(&ev, 2).is_err());
        let ev = evals_from(&[&[1.0, 2.0, 4.0], &[1.0, 3.0, 4.0]]);
        assert!(estimate_moment_stats(&ev, 4).is_err());
    }

    #[test]
    fn synthetic_field_pilot_converges_to_closed_form() {
        let n_points = 5;
        let h = synthetic_field_hierarchy(n_points).unwrap();
        let ev = pilot_evaluations(&h, BlockLayout::Plain, 100_000, 21, 0, None).unwrap();
        let s = estimate_moment_stats(&ev, 100_000).unwrap();
        let exact = synthetic_field_moments(n_points);
        for i in 0..3 {
            for j in 0..n_points {
                assert!((s.rho[i][j] - exact.rho[i][j]).abs() < 0.01, "model {i} point {j}");
                if exact.sigma[i][j] == 0.0 {
                    assert_eq!(s.sigma[i][j], 0.0);
                } else {
                    assert!((s.sigma[i][j] / exact.sigma[i][j] - 1.0).abs() < 0.02);
                }
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let s = PilotStats::scalar(&[2.0, 1.5], &[1.0, 0.9]).unwrap();
        let back = PilotStats::from_json(&s.to_json().unwrap()).unwrap();
        assert_eq!(s, back);
        let bad = s.to_json().unwrap().replace("0.9", "1.9");
        assert!(PilotStats::from_json(&bad).is_err());
    }
}
