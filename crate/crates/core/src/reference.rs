//! Reference values of the benchmark statistics: closed forms for the
//! built-in hierarchies, or plain Monte Carlo on the high-fidelity model
//! stored as a JSON oracle file.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MfmcError, Result};
use crate::estimators::sobol_single_level;
use crate::hierarchy::{field_grid, ModelHierarchy};
use crate::numerics::{mean, sample_variance};
use crate::sampling::{
    build_sobol_block_on_streams, evaluate_models_on_blocks, stream_id, Purpose,
};

/// Suffix of the keys holding normalized Sobol indices.
pub const NORMALIZED_SUFFIX: &str = "-normalized";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceValues {
    pub hierarchy: String,
    pub source: String,
    pub samples: Option<usize>,
    pub seed: Option<u64>,
    /// Statistic label (optionally with the normalized suffix) to values.
    pub values: BTreeMap<String, Vec<f64>>,
}

impl ReferenceValues {
    pub fn get(&self, key: &str) -> Result<&[f64]> {
        self.values
            .get(key)
            .map(Vec::as_slice)
            .ok_or_else(|| MfmcError::MissingReference {
                hierarchy: self.hierarchy.clone(),
                statistic: key.to_string(),
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

/// Variance of `sin(z)` and of `sin^2(z)` for `z ~ U(-pi, pi)`.
const VAR_SIN: f64 = 0.5;
const VAR_SIN_SQ: f64 = 0.125;

/// Ishigami constants of the high-fidelity model.
const ISHIGAMI_A: f64 = 5.0;
const ISHIGAMI_B: f64 = 0.1;

/// Main-effect and total-effect variances `(V_j, T_j)` and the total
/// variance of the high-fidelity Ishigami function.
pub fn ishigami_sobol_variances() -> ([f64; 3], [f64; 3], f64) {
    let (a, b) = (ISHIGAMI_A, ISHIGAMI_B);
    let v1 = 0.5 * (1.0 + b * PI.powi(4) / 5.0).powi(2);
    let v2 = a * a / 8.0;
    let v13 = 8.0 * b * b * PI.powi(8) / 225.0;
    ([v1, v2, 0.0], [v1 + v13, v2, v13], v1 + v2 + v13)
}

fn insert_sobol(values: &mut BTreeMap<String, Vec<f64>>, main: Vec<f64>, total: Vec<f64>, var: &[f64]) {
    let d = main.len() / var.len();
    let norm = |v: &[f64]| -> Vec<f64> { v.iter().enumerate().map(|(c, x)| x / var[c / d]).collect() };
    values.insert(format!("sobol-main{NORMALIZED_SUFFIX}"), norm(&main));
    values.insert(format!("sobol-total{NORMALIZED_SUFFIX}"), norm(&total));
    values.insert("sobol-main".into(), main);
    values.insert("sobol-total".into(), total);
}

/// Closed-form references for the built-in hierarchies, keyed by label.
pub fn analytic_reference(label: &str) -> Option<ReferenceValues> {
    let mut values = BTreeMap::new();
    if label == "ishigami" {
        let (main, total, var) = ishigami_sobol_variances();
        values.insert("expectation".into(), vec![ISHIGAMI_A / 2.0]);
        values.insert("variance".into(), vec![var]);
        insert_sobol(&mut values, main.to_vec(), total.to_vec(), &[var]);
    } else if label == "quintic" {
        let v3 = 0.01 * PI.powi(10) / 11.0;
        let parts = vec![VAR_SIN, VAR_SIN_SQ, v3];
        let var: f64 = parts.iter().sum();
        values.insert("expectation".into(), vec![0.5]);
        values.insert("variance".into(), vec![var]);
        insert_sobol(&mut values, parts.clone(), parts, &[var]);
    } else if let Some(n) = label
        .strip_prefix("synthetic-field-")
        .and_then(|n| n.parse::<usize>().ok())
    {
        let x = field_grid(n);
        let var: Vec<f64> = x.iter().map(|x| 1.0 + 0.01 * x * x).collect();
        let main: Vec<f64> = x
            .iter()
            .flat_map(|&x| {
                let s = crate::numerics::sin_pi(x);
                let c = crate::numerics::cos_pi(x);
                [s * s, c * c, 0.01 * x * x]
            })
            .collect();
        values.insert("expectation".into(), vec![0.0; n]);
        values.insert("variance".into(), var.clone());
        insert_sobol(&mut values, main.clone(), main, &var);
    } else {
        return None;
    }
    Some(ReferenceValues {
        hierarchy: label.to_string(),
        source: "analytic".into(),
        samples: None,
        seed: None,
        values,
    })
}

/// Plain Monte Carlo references from `samples` high-fidelity evaluations on
/// the dedicated reference streams.
pub fn monte_carlo_reference(
    hierarchy: &ModelHierarchy,
    samples: usize,
    seed: u64,
) -> Result<ReferenceValues> {
    if samples < 2 {
        return Err(MfmcError::TooFewSamples {
            required: 2,
            actual: samples,
        });
    }
    let block = build_sobol_block_on_streams(
        hierarchy.distributions(),
        samples,
        seed,
        stream_id(0, Purpose::Reference),
        stream_id(0, Purpose::ReferenceSecond),
    )?;
    let ev = evaluate_models_on_blocks(hierarchy, &block.blocks(), &[0], &[samples], None)?;
    let out = ev.model_outputs(0);
    let n_out = hierarchy.output_len();
    let d = hierarchy.input_dim();
    let mut values = BTreeMap::new();
    let mut mu = Vec::with_capacity(n_out);
    let mut var = Vec::with_capacity(n_out);
    let (mut main, mut total, mut pooled) = (Vec::new(), Vec::new(), Vec::new());
    for j in 0..n_out {
        let base = out[0].column_prefix(j, samples);
        let second = out[1].column_prefix(j, samples);
        mu.push(mean(&base));
        var.push(sample_variance(&base));
        pooled.push(0.5 * (sample_variance(&base) + sample_variance(&second)));
        for c in 0..d {
            let mixed = out[2 + c].column_prefix(j, samples);
            let idx = sobol_single_level(&base, &second, &mixed)?;
            main.push(idx.main);
            total.push(idx.total);
        }
    }
    values.insert("expectation".into(), mu);
    values.insert("variance".into(), var);
    insert_sobol(&mut values, main, total, &pooled);
    Ok(ReferenceValues {
        hierarchy: hierarchy.label().to_string(),
        source: "monte-carlo".into(),
        samples: Some(samples),
        seed: Some(seed),
        values,
    })
}

/// Reference values under `key` (a statistic label, optionally with the
/// normalized suffix), from the file if given, else closed form.
pub fn reference_for(
    hierarchy: &ModelHierarchy,
    file: Option<&ReferenceValues>,
    key: &str,
) -> Result<Vec<f64>> {
    let missing = || MfmcError::MissingReference {
        hierarchy: hierarchy.label().to_string(),
        statistic: key.to_string(),
    };
    match file {
        Some(r) if r.hierarchy == hierarchy.label() => Ok(r.get(key)?.to_vec()),
        Some(_) => Err(missing()),
        None => analytic_reference(hierarchy.label())
            .and_then(|r| r.values.get(key).cloned())
            .ok_or_else(missing),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{ishigami_hierarchy, quintic_hierarchy};

    #[test]
    fn ishigami_closed_forms() {
        let r = analytic_reference("ishigami").unwrap();
        let v = r.get("variance").unwrap()[0];
        assert!((v - 10.845).abs() < 1e-3, "{v}");
        let s = r.get("sobol-main-normalized").unwrap();
        let t = r.get("sobol-total-normalized").unwrap();
        for (got, want) in s.iter().zip([0.401, 0.288, 0.0]) {
            assert!((got - want).abs() < 1e-3);
        }
        for (got, want) in t.iter().zip([0.712, 0.288, 0.311]) {
            assert!((got - want).abs() < 1e-3);
        }
    }

    #[test]
    fn unknown_label_has_no_closed_form() {
        assert!(analytic_reference("heat-equation").is_none());
        assert!(analytic_reference("synthetic-field-x").is_none());
        assert_eq!(analytic_reference("synthetic-field-3").unwrap().get("expectation").unwrap().len(), 3);
    }

    #[test]
    fn monte_carlo_agrees_with_closed_form() {
        for h in [ishigami_hierarchy(), quintic_hierarchy()] {
            let mc = monte_carlo_reference(&h, 200_000, 3).unwrap();
            let exact = analytic_reference(h.label()).unwrap();
            let var = exact.get("variance").unwrap()[0];
            let e = mc.get("expectation").unwrap()[0] - exact.get("expectation").unwrap()[0];
            assert!(e.abs() < 4.0 * (var / 200_000.0).sqrt(), "{}: {e}", h.label());
            let rel = mc.get("variance").unwrap()[0] / var - 1.0;
            assert!(rel.abs() < 0.03, "{}: {rel}", h.label());
            let s = mc.get("sobol-main-normalized").unwrap();
            let s_exact = exact.get("sobol-main-normalized").unwrap();
            for (a, b) in s.iter().zip(s_exact) {
                assert!((a - b).abs() < 0.02, "{}: {s:?}", h.label());
            }
        }
    }

    #[test]
    fn reference_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ref.json");
        let r = analytic_reference("quintic").unwrap();
        r.save(&path).unwrap();
        assert_eq!(ReferenceValues::load(&path).unwrap(), r);
    }
}
