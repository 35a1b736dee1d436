//! One-dimensional regression maps from a low-fidelity output value to a
//! predicted high-fidelity value.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{MfmcError, Result};
use crate::numerics::mean;
use crate::sampling::NestedEvaluations;

/// Minimum number of training pairs for a Gaussian process fit.
pub const MIN_TRAINING_PAIRS: usize = 5;

const LENGTH_SCALE_POINTS: usize = 20;
const LENGTH_SCALE_RANGE: (f64, f64) = (0.01, 10.0);
const NUGGETS: [f64; 4] = [1e-8, 1e-6, 1e-4, 1e-2];

pub trait Regressor1D: Send + Sync + fmt::Debug {
    /// Posterior mean and variance at `x`.
    fn predict(&self, x: f64) -> Result<(f64, f64)>;

    fn predict_mean(&self, x: f64) -> Result<f64> {
        self.predict(x).map(|(m, _)| m)
    }
}

/// `g(x) = x`.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityMap;

impl Regressor1D for IdentityMap {
    fn predict(&self, x: f64) -> Result<(f64, f64)> {
        Ok((x, 0.0))
    }
}

/// Squared-exponential kernel hyperparameters. The nugget is relative to
/// the signal variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpHyperparameters {
    pub length_scale: f64,
    pub nugget: f64,
    pub signal_variance: f64,
    pub prior_mean: f64,
    pub log_likelihood: f64,
}

#[derive(Debug, Clone)]
struct GpState {
    hyper: GpHyperparameters,
    /// Lower Cholesky factor of `R + nugget I`.
    chol: DMatrix<f64>,
    /// `(R + nugget I)^{-1} (y - mean)`
    weights: DVector<f64>,
}

/// Gaussian-process regression with a squared-exponential kernel and a
/// constant prior mean equal to the training-target mean.
#[derive(Debug, Clone, Default)]
pub struct GaussianProcess {
    x: Vec<f64>,
    y: Vec<f64>,
    state: Option<GpState>,
}

#[derive(Serialize, Deserialize)]
struct GpSnapshot {
    x: Vec<f64>,
    y: Vec<f64>,
    length_scale: f64,
    nugget: f64,
}

fn correlation(x: &[f64], length_scale: f64, nugget: f64) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| {
        let d = (x[i] - x[j]) / length_scale;
        (-0.5 * d * d).exp() + if i == j { nugget } else { 0.0 }
    })
}

fn factor(
    x: &[f64],
    centered: &DVector<f64>,
    length_scale: f64,
    nugget: f64,
    prior_mean: f64,
) -> Option<GpState> {
    let n = x.len() as f64;
    let chol = correlation(x, length_scale, nugget).cholesky()?;
    let weights = chol.solve(centered);
    let signal_variance = (centered.dot(&weights) / n).max(0.0);
    let log_det: f64 = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let log_likelihood = if signal_variance > 0.0 {
        -0.5 * n * signal_variance.ln()
            - 0.5 * log_det
            - 0.5 * n * (1.0 + (2.0 * std::f64::consts::PI).ln())
    } else {
        f64::INFINITY
    };
    if !log_likelihood.is_finite() && signal_variance > 0.0 {
        return None;
    }
    Some(GpState {
        hyper: GpHyperparameters {
            length_scale,
            nugget,
            signal_variance,
            prior_mean,
            log_likelihood,
        },
        chol: chol.l(),
        weights,
    })
}

fn check_training(x: &[f64], y: &[f64], min_pairs: usize) -> Result<()> {
    if x.len() != y.len() {
        return Err(MfmcError::DegenerateRegression(
            "inputs and targets differ in length".into(),
        ));
    }
    if x.len() < min_pairs {
        return Err(MfmcError::DegenerateRegression(format!(
            "need at least {min_pairs} training pairs, got {}",
            x.len()
        )));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(MfmcError::DegenerateRegression(
            "non-finite training data".into(),
        ));
    }
    if x.iter().all(|&v| v == x[0]) {
        return Err(MfmcError::DegenerateRegression(
            "all training inputs are identical".into(),
        ));
    }
    Ok(())
}

impl GaussianProcess {
    /// An unfitted process; `predict` fails until it is fitted.
    pub fn unfitted() -> Self {
        Self::default()
    }

    /// Fit with hyperparameters chosen by maximizing the marginal
    /// likelihood over a fixed grid of length scales and nuggets.
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        check_training(x, y, MIN_TRAINING_PAIRS)?;
        let prior_mean = mean(y);
        let centered = DVector::from_iterator(y.len(), y.iter().map(|v| v - prior_mean));
        let lo = x.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let range = hi - lo;
        if centered.iter().all(|&t| t == 0.0) {
            // constant targets: any kernel gives the constant predictor
            let state = factor(x, &centered, range, NUGGETS[NUGGETS.len() - 1], prior_mean)
                .ok_or_else(|| MfmcError::DegenerateRegression("factorization failed".into()))?;
            return Ok(Self {
                x: x.to_vec(),
                y: y.to_vec(),
                state: Some(state),
            });
        }
        let (a, b) = (LENGTH_SCALE_RANGE.0.ln(), LENGTH_SCALE_RANGE.1.ln());
        let mut best: Option<GpState> = None;
        for k in 0..LENGTH_SCALE_POINTS {
            let t = k as f64 / (LENGTH_SCALE_POINTS - 1) as f64;
            let length_scale = range * (a + t * (b - a)).exp();
            for &nugget in &NUGGETS {
                if let Some(state) = factor(x, &centered, length_scale, nugget, prior_mean) {
                    let better = best
                        .as_ref()
                        .is_none_or(|s| state.hyper.log_likelihood > s.hyper.log_likelihood);
                    if better {
                        best = Some(state);
                    }
                }
            }
        }
        let state = best.ok_or_else(|| {
            MfmcError::DegenerateRegression("no grid point gave a valid factorization".into())
        })?;
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            state: Some(state),
        })
    }

    /// Fit with fixed hyperparameters. A zero nugget interpolates the
    /// training data exactly but may fail to factor.
    pub fn fit_with(x: &[f64], y: &[f64], length_scale: f64, nugget: f64) -> Result<Self> {
        check_training(x, y, 2)?;
        if !(length_scale > 0.0) || !(nugget >= 0.0) {
            return Err(MfmcError::DegenerateRegression(
                "length scale must be positive and nugget nonnegative".into(),
            ));
        }
        let prior_mean = mean(y);
        let centered = DVector::from_iterator(y.len(), y.iter().map(|v| v - prior_mean));
        let state = factor(x, &centered, length_scale, nugget, prior_mean).ok_or_else(|| {
            MfmcError::DegenerateRegression("kernel matrix is not positive definite".into())
        })?;
        Ok(Self {
            x: x.to_vec(),
            y: y.to_vec(),
            state: Some(state),
        })
    }

    pub fn is_fitted(&self) -> bool {
        self.state.is_some()
    }

    pub fn hyperparameters(&self) -> Option<GpHyperparameters> {
        self.state.as_ref().map(|s| s.hyper)
    }

    pub fn training_pairs(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.x.iter().copied().zip(self.y.iter().copied())
    }

    /// Training pairs and hyperparameters as JSON.
    pub fn to_json(&self) -> Result<String> {
        let hyper = self.hyperparameters().ok_or(MfmcError::NotFitted)?;
        Ok(serde_json::to_string_pretty(&GpSnapshot {
            x: self.x.clone(),
            y: self.y.clone(),
            length_scale: hyper.length_scale,
            nugget: hyper.nugget,
        })?)
    }

    /// Rebuild a fitted process from [`GaussianProcess::to_json`] output.
    pub fn from_json(text: &str) -> Result<Self> {
        let snap: GpSnapshot = serde_json::from_str(text)?;
        Self::fit_with(&snap.x, &snap.y, snap.length_scale, snap.nugget)
    }
}

impl Regressor1D for GaussianProcess {
    fn predict(&self, x: f64) -> Result<(f64, f64)> {
        let state = self.state.as_ref().ok_or(MfmcError::NotFitted)?;
        let h = state.hyper;
        let r = DVector::from_iterator(
            self.x.len(),
            self.x.iter().map(|xi| {
                let d = (x - xi) / h.length_scale;
                (-0.5 * d * d).exp()
            }),
        );
        let mu = h.prior_mean + r.dot(&state.weights);
        let v = state
            .chol
            .solve_lower_triangular(&r)
            .expect("Cholesky factor has a positive diagonal");
        let var = (h.signal_variance * (1.0 - v.norm_squared())).max(0.0);
        Ok((mu, var))
    }

    fn predict_mean(&self, x: f64) -> Result<f64> {
        let state = self.state.as_ref().ok_or(MfmcError::NotFitted)?;
        let h = state.hyper;
        let dot: f64 = self
            .x
            .iter()
            .zip(state.weights.iter())
            .map(|(xi, w)| {
                let d = (x - xi) / h.length_scale;
                (-0.5 * d * d).exp() * w
            })
            .sum();
        Ok(h.prior_mean + dot)
    }
}

/// Linear interpolation between sorted training inputs, constant beyond the
/// ends. Repeated inputs are averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseLinear {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl PiecewiseLinear {
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Self> {
        check_training(x, y, 2)?;
        let mut pairs: Vec<(f64, f64)> = x.iter().copied().zip(y.iter().copied()).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (mut xs, mut ys) = (Vec::new(), Vec::<f64>::new());
        let mut i = 0;
        while i < pairs.len() {
            let j = pairs[i..].iter().take_while(|p| p.0 == pairs[i].0).count();
            let group: Vec<f64> = pairs[i..i + j].iter().map(|p| p.1).collect();
            xs.push(pairs[i].0);
            ys.push(mean(&group));
            i += j;
        }
        Ok(Self { x: xs, y: ys })
    }
}

impl Regressor1D for PiecewiseLinear {
    fn predict(&self, x: f64) -> Result<(f64, f64)> {
        let n = self.x.len();
        if x <= self.x[0] {
            return Ok((self.y[0], 0.0));
        }
        if x >= self.x[n - 1] {
            return Ok((self.y[n - 1], 0.0));
        }
        let k = self.x.partition_point(|&v| v <= x);
        let (x0, x1) = (self.x[k - 1], self.x[k]);
        let t = (x - x0) / (x1 - x0);
        Ok((self.y[k - 1] + t * (self.y[k] - self.y[k - 1]), 0.0))
    }
}

/// Fit a Gaussian process on `(low-fidelity, high-fidelity)` pairs.
pub fn fit_regressor(pairs: &[(f64, f64)]) -> Result<GaussianProcess> {
    let (x, y): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    GaussianProcess::fit(&x, &y)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegressorKind {
    #[default]
    GaussianProcess,
    PiecewiseLinear,
}

/// One regression map per model, indexed by the model's position in the
/// hierarchy. The high-fidelity model is never mapped.
#[derive(Debug, Clone)]
pub struct RegressionBridge {
    maps: Vec<Option<Arc<dyn Regressor1D>>>,
}

impl RegressionBridge {
    /// Every low-fidelity model passes through unchanged.
    pub fn identity(num_models: usize) -> Self {
        Self {
            maps: (0..num_models)
                .map(|i| (i > 0).then(|| Arc::new(IdentityMap) as Arc<dyn Regressor1D>))
                .collect(),
        }
    }

    /// Bridge with explicit maps for models `1..K`; `None` marks a model
    /// without a fitted map.
    pub fn from_maps(maps: Vec<Option<Arc<dyn Regressor1D>>>) -> Self {
        let mut all = vec![None];
        all.extend(maps);
        Self { maps: all }
    }

    /// Fit one map per low-fidelity model on evaluations in which every
    /// model saw the same training inputs. Scalar outputs only.
    pub fn fit(training: &NestedEvaluations, kind: RegressorKind) -> Result<Self> {
        if training.output_len() != 1 {
            return Err(MfmcError::InvalidInput(
                "regression bridges need scalar model outputs".into(),
            ));
        }
        let n = training.counts()[0];
        if training.counts().iter().any(|&m| m != n) {
            return Err(MfmcError::InvalidInput(
                "regression training needs every model on the same inputs".into(),
            ));
        }
        let hf = training.outputs(0).column_prefix(0, n);
        let k_max = training.model_indices().iter().copied().max().unwrap_or(0);
        let mut maps: Vec<Option<Arc<dyn Regressor1D>>> = vec![None; k_max + 1];
        for k in 1..training.num_models() {
            let lf = training.outputs(k).column_prefix(0, n);
            let map: Arc<dyn Regressor1D> = match kind {
                RegressorKind::GaussianProcess => Arc::new(GaussianProcess::fit(&lf, &hf)?),
                RegressorKind::PiecewiseLinear => Arc::new(PiecewiseLinear::fit(&lf, &hf)?),
            };
            maps[training.model_indices()[k]] = Some(map);
        }
        Ok(Self { maps })
    }

    /// `g_i(value)` for model `model`; the identity for model 0.
    pub fn apply(&self, model: usize, value: f64) -> Result<f64> {
        if model == 0 {
            return Ok(value);
        }
        match self.maps.get(model) {
            Some(Some(map)) => map.predict_mean(value),
            _ => Err(MfmcError::NotFitted),
        }
    }

    /// Map the low-fidelity outputs of `evals` through their bridges.
    pub fn apply_to(&self, evals: &NestedEvaluations) -> Result<NestedEvaluations> {
        let indices = evals.model_indices().to_vec();
        evals.map_low_fidelity(|k, v| self.apply(indices[k], v))
    }
}

/// Spread of the targets, used for relative tolerances in tests and reports.
pub fn target_range(y: &[f64]) -> f64 {
    let lo = y.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = y.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    hi - lo
}
