//! Model hierarchies: an ordered list of models sharing one input
//! distribution, index 0 being the high-fidelity model.
//!
//! Besides the generic [`ModelHierarchy`] this module ships the two scalar
//! benchmark hierarchies (Ishigami and Quintic) and a closed-form
//! vector-valued hierarchy whose per-point moments are known exactly.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{MfmcError, Result};
use crate::numerics::{cos_pi, sin_pi};

/// Writes the outputs for one input vector into the provided slice.
pub type EvalFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;

/// Default per-evaluation costs of the three-model benchmark hierarchies.
pub const BENCHMARK_COSTS: [f64; 3] = [1.0, 0.05, 0.001];

/// Independent marginal distribution of one input coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDistribution {
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, std_dev: f64 },
}

impl InputDistribution {
    fn validate(&self) -> Result<()> {
        let ok = match *self {
            InputDistribution::Uniform { low, high } => {
                low.is_finite() && high.is_finite() && low < high
            }
            InputDistribution::Normal { mean, std_dev } => {
                mean.is_finite() && std_dev.is_finite() && std_dev > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(MfmcError::InvalidInput(format!(
                "invalid input distribution {self:?}"
            )))
        }
    }
}

/// A deterministic model `R^d -> R^n_out` with a per-evaluation cost.
#[derive(Clone)]
pub struct Model {
    label: String,
    cost: f64,
    evaluator: Arc<EvalFn>,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("label", &self.label)
            .field("cost", &self.cost)
            .finish_non_exhaustive()
    }
}

impl Model {
    pub fn new<F>(label: impl Into<String>, cost: f64, evaluator: F) -> Self
    where
        F: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            label: label.into(),
            cost,
            evaluator: Arc::new(evaluator),
        }
    }

    /// Convenience constructor for scalar-output models.
    pub fn scalar<F>(label: impl Into<String>, cost: f64, f: F) -> Self
    where
        F: Fn(&[f64]) -> f64 + Send + Sync + 'static,
    {
        Self::new(label, cost, move |s, out| out[0] = f(s))
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn cost(&self) -> f64 {
        self.cost
    }

    fn with_cost(&self, cost: f64) -> Self {
        Self {
            cost,
            ..self.clone()
        }
    }
}

/// Ordered models `psi^(1..K)` sharing input dimension, input distribution
/// and output length.
#[derive(Debug, Clone)]
pub struct ModelHierarchy {
    label: String,
    models: Vec<Model>,
    distributions: Vec<InputDistribution>,
    output_len: usize,
    output_weights: Vec<f64>,
}

impl ModelHierarchy {
    pub fn new(
        label: impl Into<String>,
        distributions: Vec<InputDistribution>,
        output_len: usize,
        models: Vec<Model>,
    ) -> Result<Self> {
        if models.is_empty() {
            return Err(MfmcError::InvalidInput("hierarchy has no models".into()));
        }
        if distributions.is_empty() {
            return Err(MfmcError::InvalidInput("input dimension must be >= 1".into()));
        }
        if output_len == 0 {
            return Err(MfmcError::InvalidInput("output length must be >= 1".into()));
        }
        for d in &distributions {
            d.validate()?;
        }
        for m in &models {
            if !(m.cost.is_finite() && m.cost > 0.0) {
                return Err(MfmcError::InvalidInput(format!(
                    "model {:?} has non-positive cost {}",
                    m.label, m.cost
                )));
            }
        }
        Ok(Self {
            label: label.into(),
            models,
            distributions,
            output_len,
            output_weights: vec![1.0; output_len],
        })
    }

    /// Replace the per-component weights `|Omega_j|`; all must be > 0.
    pub fn with_output_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.output_len {
            return Err(MfmcError::InvalidInput(format!(
                "{} output weights for {} outputs",
                weights.len(),
                self.output_len
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(MfmcError::InvalidInput(
                "output weights must be strictly positive".into(),
            ));
        }
        self.output_weights = weights;
        Ok(self)
    }

    /// Replace the per-model costs.
    pub fn with_costs(mut self, costs: &[f64]) -> Result<Self> {
        if costs.len() != self.models.len() {
            return Err(MfmcError::InvalidInput(format!(
                "{} costs for {} models",
                costs.len(),
                self.models.len()
            )));
        }
        if costs.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(MfmcError::InvalidInput("costs must be strictly positive".into()));
        }
        self.models = self
            .models
            .iter()
            .zip(costs)
            .map(|(m, &w)| m.with_cost(w))
            .collect();
        Ok(self)
    }

    /// Sub-hierarchy made of the listed models, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() || indices.iter().any(|&i| i >= self.models.len()) {
            return Err(MfmcError::InvalidInput(format!(
                "bad model subset {indices:?} of {} models",
                self.models.len()
            )));
        }
        Ok(Self {
            models: indices.iter().map(|&i| self.models[i].clone()).collect(),
            ..self.clone()
        })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn model(&self, index: usize) -> &Model {
        &self.models[index]
    }

    pub fn input_dim(&self) -> usize {
        self.distributions.len()
    }

    pub fn distributions(&self) -> &[InputDistribution] {
        &self.distributions
    }

    pub fn output_len(&self) -> usize {
        self.output_len
    }

    pub fn output_weights(&self) -> &[f64] {
        &self.output_weights
    }

    pub fn costs(&self) -> Vec<f64> {
        self.models.iter().map(|m| m.cost).collect()
    }

    /// Evaluate model `model` on `input` and write into `out`.
    ///
    /// `sample` is only used to label a non-finite output in the error.
    pub fn evaluate_into(
        &self,
        model: usize,
        input: &[f64],
        sample: usize,
        out: &mut [f64],
    ) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(MfmcError::InputLength {
                expected: self.input_dim(),
                actual: input.len(),
            });
        }
        if out.len() != self.output_len {
            return Err(MfmcError::OutputLength {
                model,
                expected: self.output_len,
                actual: out.len(),
            });
        }
        (self.models[model].evaluator)(input, out);
        if out.iter().any(|v| !v.is_finite()) {
            return Err(MfmcError::NonFiniteOutput { model, sample });
        }
        Ok(())
    }

    pub fn evaluate(&self, model: usize, input: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.output_len];
        self.evaluate_into(model, input, 0, &mut out)?;
        Ok(out)
    }
}

fn benchmark_inputs() -> Vec<InputDistribution> {
    vec![InputDistribution::Uniform { low: -PI, high: PI }; 3]
}

/// The Ishigami function (`a = 5`, `b = 0.1`) and two cheaper variants,
/// inputs `z_i ~ U(-pi, pi)`.
pub fn ishigami_hierarchy() -> ModelHierarchy {
    let [w1, w2, w3] = BENCHMARK_COSTS;
    let models = vec![
        Model::scalar("f1", w1, |z| {
            let s1 = z[0].sin();
            let s2 = z[1].sin();
            s1 + 5.0 * s2 * s2 + 0.1 * z[2].powi(4) * s1
        }),
        Model::scalar("f2", w2, |z| {
            let s1 = z[0].sin();
            let s2 = z[1].sin();
            s1 + 4.75 * s2 * s2 + 0.1 * z[2].powi(4) * s1
        }),
        Model::scalar("f3", w3, |z| {
            let s1 = z[0].sin();
            let s2 = z[1].sin();
            s1 + 3.0 * s2 * s2 + 0.9 * z[2] * z[2] * s1
        }),
    ];
    ModelHierarchy::new("ishigami", benchmark_inputs(), 1, models)
        .expect("ishigami hierarchy is well formed")
}

/// Quintic benchmark: the high-fidelity model depends on `z_3^5`, the
/// cheaper ones on `z_3^3` and `z_3`, so the dependence is strongly
/// nonlinear but monotone.
pub fn quintic_hierarchy() -> ModelHierarchy {
    let [w1, w2, w3] = BENCHMARK_COSTS;
    let common = |z: &[f64]| {
        let s2 = z[1].sin();
        z[0].sin() + s2 * s2
    };
    let models = vec![
        Model::scalar("f1", w1, move |z| common(z) + 0.1 * z[2].powi(5)),
        Model::scalar("f2", w2, move |z| common(z) + 2.0 * z[2].powi(3)),
        Model::scalar("f3", w3, move |z| common(z) + 20.0 * z[2]),
    ];
    ModelHierarchy::new("quintic", benchmark_inputs(), 1, models)
        .expect("quintic hierarchy is well formed")
}

/// Grid `x_j = j / n_points`, `j = 1..=n_points`.
pub fn field_grid(n_points: usize) -> Vec<f64> {
    (1..=n_points).map(|j| j as f64 / n_points as f64).collect()
}

/// Vector-valued hierarchy on a 1-D grid with `s ~ N(0, I_3)`:
///
/// * `psi1(x, s) = s1 sin(pi x) + s2 cos(pi x) + 0.1 s3 x`
/// * `psi2(x, s) = s1 sin(pi x) + s2 cos(pi x)`
/// * `psi3(x, s) = s1 sin(pi x)`
pub fn synthetic_field_hierarchy(n_points: usize) -> Result<ModelHierarchy> {
    if n_points == 0 {
        return Err(MfmcError::InvalidInput("n_points must be >= 1".into()));
    }
    let grid = Arc::new(field_grid(n_points));
    let basis: Arc<Vec<(f64, f64, f64)>> = Arc::new(
        grid.iter()
            .map(|&x| (sin_pi(x), cos_pi(x), 0.1 * x))
            .collect(),
    );
    let [w1, w2, w3] = BENCHMARK_COSTS;
    let b1 = Arc::clone(&basis);
    let b2 = Arc::clone(&basis);
    let b3 = basis;
    let models = vec![
        Model::new("psi1", w1, move |s, out| {
            for (o, &(sn, cs, lin)) in out.iter_mut().zip(b1.iter()) {
                *o = s[0] * sn + s[1] * cs + s[2] * lin;
            }
        }),
        Model::new("psi2", w2, move |s, out| {
            for (o, &(sn, cs, _)) in out.iter_mut().zip(b2.iter()) {
                *o = s[0] * sn + s[1] * cs;
            }
        }),
        Model::new("psi3", w3, move |s, out| {
            for (o, &(sn, _, _)) in out.iter_mut().zip(b3.iter()) {
                *o = s[0] * sn;
            }
        }),
    ];
    let inputs = vec![
        InputDistribution::Normal {
            mean: 0.0,
            std_dev: 1.0
        };
        3
    ];
    ModelHierarchy::new(format!("synthetic-field-{n_points}"), inputs, n_points, models)
}

/// Exact per-point standard deviations and correlations with `psi1` of the
/// synthetic field hierarchy. Indexed `[model][point]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMoments {
    pub x: Vec<f64>,
    pub sigma: Vec<Vec<f64>>,
    pub rho: Vec<Vec<f64>>,
}

pub fn synthetic_field_moments(n_points: usize) -> FieldMoments {
    let x = field_grid(n_points);
    let var1: Vec<f64> = x.iter().map(|&x| 1.0 + 0.01 * x * x).collect();
    let sigma = vec![
        var1.iter().map(|v| v.sqrt()).collect(),
        vec![1.0; n_points],
        x.iter().map(|&x| sin_pi(x).abs()).collect(),
    ];
    let rho = vec![
        vec![1.0; n_points],
        var1.iter().map(|v| 1.0 / v.sqrt()).collect(),
        x.iter()
            .zip(&var1)
            .map(|(&x, v)| sin_pi(x).abs() / v.sqrt())
            .collect(),
    ];
    FieldMoments { x, sigma, rho }
}

/// Resolve a built-in hierarchy by name. `n_points` is only used by
/// `synthetic-field`.
pub fn builtin_hierarchy(name: &str, n_points: usize) -> Result<ModelHierarchy> {
    match name {
        "ishigami" => Ok(ishigami_hierarchy()),
        "quintic" => Ok(quintic_hierarchy()),
        "synthetic-field" => synthetic_field_hierarchy(n_points),
        other => Err(MfmcError::UnknownHierarchy(other.to_string())),
    }
}
