//! Single-level (one model) estimators of variance and Sobol indices.

use serde::{Deserialize, Serialize};

use crate::error::{MfmcError, Result};
use crate::numerics::{mean, pairwise_sum, sample_variance};

/// Unbiased sample variance of `samples`.
pub fn single_level_variance(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(MfmcError::TooFewSamples {
            required: 2,
            actual: samples.len(),
        });
    }
    Ok(sample_variance(samples))
}

/// Main- and total-effect estimates for one input coordinate.
///
/// `main` and `total` are variance-scaled (`V_j`, `T_j`); the normalized
/// values divide by the pooled variance `(V + V') / 2` of the two base sets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SobolIndex {
    pub main: f64,
    pub total: f64,
    pub variance: f64,
    pub main_normalized: f64,
    pub total_normalized: f64,
}

/// Main-effect estimator
/// `2/(2m-1) * ( sum psi(s_i) psi(y_i) - m ((mu + mu')/2)^2 + (V + V')/4 )`.
pub(crate) fn main_effect(base: &[f64], second: &[f64], mixed: &[f64]) -> f64 {
    let m = base.len() as f64;
    let cross: Vec<f64> = base.iter().zip(mixed).map(|(a, b)| a * b).collect();
    let mu = 0.5 * (mean(base) + mean(second));
    let v_pooled = sample_variance(base) + sample_variance(second);
    2.0 / (2.0 * m - 1.0) * (pairwise_sum(&cross) - m * mu * mu + v_pooled / 4.0)
}

/// Total-effect estimator `1/(2m) * sum (psi(s'_i) - psi(y_i))^2`.
pub(crate) fn total_effect(second: &[f64], mixed: &[f64]) -> f64 {
    let m = second.len() as f64;
    let sq: Vec<f64> = second
        .iter()
        .zip(mixed)
        .map(|(a, b)| (a - b) * (a - b))
        .collect();
    pairwise_sum(&sq) / (2.0 * m)
}

/// Sobol indices of one coordinate from a model's outputs on `s`, `s'` and
/// the mixed set `y^j`.
pub fn sobol_single_level(base: &[f64], second: &[f64], mixed: &[f64]) -> Result<SobolIndex> {
    let m = base.len();
    if m < 2 {
        return Err(MfmcError::TooFewSamples {
            required: 2,
            actual: m,
        });
    }
    if second.len() != m || mixed.len() != m {
        return Err(MfmcError::InvalidInput(
            "Sobol blocks must have equal length".into(),
        ));
    }
    let main = main_effect(base, second, mixed);
    let total = total_effect(second, mixed);
    let variance = 0.5 * (sample_variance(base) + sample_variance(second));
    Ok(SobolIndex {
        main,
        total,
        variance,
        main_normalized: main / variance,
        total_normalized: total / variance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{ishigami_hierarchy, InputDistribution, Model, ModelHierarchy};
    use crate::sampling::{build_sobol_block, evaluate_nested_sobol};

    #[test]
    fn variance_examples() {
        assert_eq!(single_level_variance(&[1.0, 2.0, 3.0]).unwrap(), 1.0);
        assert_eq!(single_level_variance(&[2.5; 4]).unwrap(), 0.0);
        assert!(single_level_variance(&[1.0]).is_err());
    }

    fn sobol_of(h: &ModelHierarchy, m: usize, seed: u64) -> Vec<SobolIndex> {
        let block = build_sobol_block(h, m, seed).unwrap();
        let mut counts = vec![0; h.num_models()];
        counts[0] = m;
        let ev = evaluate_nested_sobol(h, &block, &counts).unwrap();
        let out = ev.model_outputs(0);
        let col = |b: usize| out[b].column_prefix(0, m);
        (0..h.input_dim())
            .map(|j| sobol_single_level(&col(0), &col(1), &col(2 + j)).unwrap())
            .collect()
    }

    #[test]
    fn inactive_coordinate_has_exactly_zero_total_effect() {
        let h = ishigami_hierarchy();
        let idx = sobol_of(&h, 500, 3);
        // Ishigami does not depend on z_3 alone but does through the
        // interaction; build a model that ignores z_2 instead
        assert!(idx[2].total > 0.0);
        let h = ModelHierarchy::new(
            "no-z2",
            vec![InputDistribution::Uniform { low: 0.0, high: 1.0 }; 3],
            1,
            vec![Model::scalar("hf", 1.0, |z| z[0] * z[2] + z[0])],
        )
        .unwrap();
        let idx = sobol_of(&h, 200, 5);
        assert_eq!(idx[1].total, 0.0);
    }

    #[test]
    fn additive_linear_model_concentrates_on_active_coordinate() {
        let h = ModelHierarchy::new(
            "linear",
            vec![InputDistribution::Normal { mean: 0.0, std_dev: 1.0 }; 3],
            1,
            vec![Model::scalar("hf", 1.0, |z| 3.0 + z[1])],
        )
        .unwrap();
        let small = sobol_of(&h, 1_000, 1)[1].main_normalized;
        let large = sobol_of(&h, 400_000, 1)[1].main_normalized;
        assert!((large - 1.0).abs() < 0.01, "{large}");
        assert!((large - 1.0).abs() <= (small - 1.0).abs() + 0.01);
        let idx = sobol_of(&h, 400_000, 2);
        assert!(idx[0].main_normalized.abs() < 0.01);
        assert!(idx[2].main_normalized.abs() < 0.01);
        assert_eq!(idx[0].total, 0.0);
    }

    #[test]
    fn main_effect_expectation_factor() {
        // E[V_j] = 2m/(2m-1) V_j for the estimator as written. With
        // V_j = 1 (psi = z_1, standard normal) and m = 4 the average over many
        // replicates should be 8/7.
        let h = ModelHierarchy::new(
            "z1",
            vec![InputDistribution::Normal { mean: 0.0, std_dev: 1.0 }; 2],
            1,
            vec![Model::scalar("hf", 1.0, |z| z[0])],
        )
        .unwrap();
        let reps = 40_000;
        let vals: Vec<f64> = (0..reps).map(|r| sobol_of(&h, 4, r)[0].main).collect();
        let avg = mean(&vals);
        let se = (sample_variance(&vals) / reps as f64).sqrt();
        assert!((avg - 8.0 / 7.0).abs() < 4.0 * se, "{avg} +- {se}");
    }
}
