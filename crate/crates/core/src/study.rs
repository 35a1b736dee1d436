//! Replicate studies: pilot, allocation and estimation for every statistic,
//! estimator mode and budget, with allocation tables, per-replicate CSV,
//! summary JSON and MSE-versus-budget sweeps.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::allocation::{
    aggregate_vector_stats, budget_for_tolerance, optimal_alpha, optimal_allocation_with,
    AllocationOptions, AllocationPlan, CostModel,
};
use crate::error::{MfmcError, Result};
use crate::estimators::{
    mfmc_nonlinear_statistic, mfmc_sobol, mfmc_statistic, statistic_by_name, BlockLayout,
    EstimatorMode, PooledVariance, SobolIndices, Statistic,
};
use crate::hierarchy::{builtin_hierarchy, ModelHierarchy};
use crate::numerics::mean;
use crate::pilot::{
    estimate_g_stats, estimate_moment_stats, estimate_q_stats, pilot_evaluations, PilotStats,
    StatsKind, MIN_PILOT_SIZE,
};
use crate::reference::{reference_for, ReferenceValues, NORMALIZED_SUFFIX};
use crate::regression::{RegressionBridge, RegressorKind, MIN_TRAINING_PAIRS};
use crate::sampling::{
    build_sobol_block_on_streams, draw_inputs_on_stream, evaluate_models_on_blocks,
    evaluate_selected, stream_id, CostConvention, EvalCache, NestedEvaluations, Purpose,
};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeSelection {
    #[default]
    Linear,
    Nonlinear,
    Both,
}

impl ModeSelection {
    pub fn modes(self) -> Vec<EstimatorMode> {
        match self {
            ModeSelection::Linear => vec![EstimatorMode::Linear],
            ModeSelection::Nonlinear => vec![EstimatorMode::Nonlinear],
            ModeSelection::Both => vec![EstimatorMode::Linear, EstimatorMode::Nonlinear],
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetUnit {
    /// Multiples of one high-fidelity evaluation.
    #[default]
    HfEquivalent,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudyConfig {
    pub hierarchy: String,
    /// Grid size of the synthetic field hierarchy.
    pub n_points: usize,
    pub costs: Option<Vec<f64>>,
    pub statistics: Vec<String>,
    pub mode: ModeSelection,
    pub pilot_size: usize,
    /// Regression training size. When unset, nonlinear mode splits the
    /// pilot evenly between training and correlation estimation.
    pub regression_size: Option<usize>,
    pub regressor: RegressorKind,
    pub budgets: Option<Vec<f64>>,
    pub budget_unit: BudgetUnit,
    pub tolerance: Option<f64>,
    pub replicates: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub output_weights: Option<Vec<f64>>,
    /// Weights of the Sobol index components; uniform when unset.
    pub sobol_weights: Option<Vec<f64>>,
    pub fold_pilot_cost: bool,
    pub sobol_cost: CostConvention,
    pub reference: Option<PathBuf>,
    pub reference_samples: usize,
    pub cache_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            hierarchy: "ishigami".into(),
            n_points: 16,
            costs: None,
            statistics: vec!["expectation".into()],
            mode: ModeSelection::Linear,
            pilot_size: 100,
            regression_size: None,
            regressor: RegressorKind::GaussianProcess,
            budgets: None,
            budget_unit: BudgetUnit::HfEquivalent,
            tolerance: None,
            replicates: 1,
            seed: 1,
            output_dir: None,
            output_weights: None,
            sobol_weights: None,
            fold_pilot_cost: false,
            sobol_cost: CostConvention::PerEvaluation,
            reference: None,
            reference_samples: 1_000_000,
            cache_dir: None,
            jobs: None,
        }
    }
}

fn config_error(e: impl std::fmt::Display) -> MfmcError {
    MfmcError::Config(e.to_string())
}

impl StudyConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(config_error)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Override one field. `raw` is parsed as JSON, falling back to a plain
    /// string.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let value: Value =
            serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self).map_err(config_error)?;
        let fields = doc.as_object_mut().expect("config serializes to an object");
        if !fields.contains_key(key) {
            return Err(config_error(format!("unknown config key {key:?}")));
        }
        fields.insert(key.to_string(), value);
        *self = serde_json::from_value(doc).map_err(|e| config_error(format!("{key}: {e}")))?;
        Ok(())
    }

    /// Correlation-pilot and training sizes for `mode`.
    pub fn pilot_split(&self, mode: EstimatorMode) -> (usize, usize) {
        match (mode, self.regression_size) {
            (EstimatorMode::Linear, _) => (self.pilot_size, 0),
            (EstimatorMode::Nonlinear, Some(n_g)) => (self.pilot_size, n_g),
            (EstimatorMode::Nonlinear, None) => {
                let n_g = self.pilot_size / 2;
                (self.pilot_size - n_g, n_g)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_inputs()?;
        match (&self.budgets, self.tolerance) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(config_error("set exactly one of budgets and tolerance"))
            }
            (Some(b), None) => {
                if b.is_empty() || b.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
                    return Err(config_error("budgets must be a nonempty list of positive numbers"));
                }
            }
            (None, Some(eps)) => {
                if !(eps.is_finite() && eps > 0.0) {
                    return Err(config_error("tolerance must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Every check except the budget source, for runs that stop before
    /// allocation.
    pub fn validate_inputs(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(config_error("replicates must be >= 1"));
        }
        if self.statistics.is_empty() {
            return Err(config_error("no statistics requested"));
        }
        for name in &self.statistics {
            statistic_by_name(name)?;
        }
        for mode in self.mode.modes() {
            let (n_rho, n_g) = self.pilot_split(mode);
            if n_rho < MIN_PILOT_SIZE {
                return Err(config_error(format!(
                    "{} mode needs a correlation pilot of at least {MIN_PILOT_SIZE} samples, got {n_rho}",
                    mode.label()
                )));
            }
            if mode == EstimatorMode::Nonlinear && n_g < MIN_TRAINING_PAIRS {
                return Err(config_error(format!(
                    "regression needs at least {MIN_TRAINING_PAIRS} training samples, got {n_g}"
                )));
            }
        }
        Ok(())
    }
}

/// A requested statistic; Sobol families keep their concrete type for the
/// normalization step.
#[derive(Debug)]
pub struct StudyStatistic {
    stat: Box<dyn Statistic>,
    sobol: Option<SobolIndices>,
}

impl StudyStatistic {
    pub fn by_name(name: &str) -> Result<Self> {
        let sobol = match name {
            "sobol-main" => Some(SobolIndices::main()),
            "sobol-total" => Some(SobolIndices::total()),
            _ => None,
        };
        Ok(Self {
            stat: statistic_by_name(name)?,
            sobol,
        })
    }

    pub fn label(&self) -> &str {
        self.stat.label()
    }

    pub fn statistic(&self) -> &dyn Statistic {
        self.stat.as_ref()
    }
}

/// Pilot evaluations of one replicate, shared by every statistic.
#[derive(Debug)]
pub struct PilotData {
    pub evals: NestedEvaluations,
    pub bridge: Option<RegressionBridge>,
}

/// Allocation of one (statistic, mode, budget) cell for one replicate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSummary {
    pub statistic: String,
    pub mode: EstimatorMode,
    pub budget_index: usize,
    /// Requested budget in high-fidelity evaluations.
    pub budget_hf: f64,
    /// Budget left for estimation after any folded-in pilot cost.
    pub estimation_budget: f64,
    pub pilot_cost: f64,
    pub plan: AllocationPlan,
    /// `sqrt(rho_bar^2)` per model from the pilot statistics.
    pub rho_bar: Vec<f64>,
    /// Predicted RMSE of the optimal plan on the first `k` models.
    pub rmse_by_models: Vec<f64>,
    /// Predicted MSE of plain Monte Carlo on the high-fidelity model.
    pub mc_predicted_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: u64,
    pub allocation: PlanSummary,
    pub values: Vec<f64>,
    pub normalized: Option<Vec<f64>>,
    pub plan_cost: f64,
    pub realized_cost: f64,
}

/// Aggregate of one (statistic, mode, budget) cell over replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupSummary {
    pub statistic: String,
    pub mode: EstimatorMode,
    pub budget: f64,
    pub replicates: usize,
    pub mean: Vec<f64>,
    pub standard_error: Vec<f64>,
    pub reference: Option<Vec<f64>>,
    pub empirical_mse: Option<f64>,
    pub relative_mse: Option<f64>,
    pub predicted_mse: f64,
    pub mc_predicted_mse: f64,
    pub normalized_mean: Option<Vec<f64>>,
    pub normalized_standard_error: Option<Vec<f64>>,
    pub normalized_reference: Option<Vec<f64>>,
    pub normalized_empirical_mse: Option<f64>,
    pub mean_m: Vec<f64>,
    pub mean_alpha: Vec<Vec<f64>>,
    pub mean_rho_bar: Vec<f64>,
    pub mean_rmse_by_models: Vec<f64>,
    pub total_plan_cost: f64,
    pub total_pilot_cost: f64,
    pub total_realized_cost: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StudySummary {
    pub hierarchy: String,
    pub models: Vec<String>,
    pub costs: Vec<f64>,
    pub seed: u64,
    pub replicates: usize,
    pub pilot_size: usize,
    pub budget_unit: BudgetUnit,
    pub fold_pilot_cost: bool,
    pub sobol_cost: CostConvention,
    pub groups: Vec<GroupSummary>,
}

pub struct Study {
    config: StudyConfig,
    hierarchy: ModelHierarchy,
    statistics: Vec<StudyStatistic>,
    modes: Vec<EstimatorMode>,
    layout: BlockLayout,
    cache: Option<EvalCache>,
    reference: Option<ReferenceValues>,
}

impl Study {
    pub fn new(config: StudyConfig) -> Result<Self> {
        config.validate()?;
        Self::without_budget(config)
    }

    /// A study that can run pilots but has no budget source yet.
    pub fn without_budget(config: StudyConfig) -> Result<Self> {
        config.validate_inputs()?;
        let mut hierarchy = builtin_hierarchy(&config.hierarchy, config.n_points)?;
        if let Some(costs) = &config.costs {
            hierarchy = hierarchy.with_costs(costs).map_err(config_error)?;
        }
        if let Some(w) = &config.output_weights {
            hierarchy = hierarchy.with_output_weights(w.clone()).map_err(config_error)?;
        }
        Self::with_hierarchy(config, hierarchy)
    }

    /// Study over a caller-supplied hierarchy; `config.hierarchy` is ignored.
    pub fn with_hierarchy(config: StudyConfig, hierarchy: ModelHierarchy) -> Result<Self> {
        config.validate_inputs()?;
        let statistics = config
            .statistics
            .iter()
            .map(|s| StudyStatistic::by_name(s))
            .collect::<Result<Vec<_>>>()?;
        if config.mode != ModeSelection::Linear && hierarchy.output_len() != 1 {
            return Err(config_error("nonlinear mode needs scalar model outputs"));
        }
        let d = hierarchy.input_dim();
        if let Some(w) = &config.sobol_weights {
            if w.len() != hierarchy.output_len() * d {
                return Err(config_error(format!(
                    "{} Sobol weights for {} index components",
                    w.len(),
                    hierarchy.output_len() * d
                )));
            }
        }
        let layout = if statistics.iter().any(|s| s.stat.layout() == BlockLayout::Sobol) {
            BlockLayout::Sobol
        } else {
            BlockLayout::Plain
        };
        let cache = config.cache_dir.as_ref().map(EvalCache::open).transpose()?;
        let reference = config.reference.as_ref().map(ReferenceValues::load).transpose()?;
        Ok(Self {
            modes: config.mode.modes(),
            config,
            hierarchy,
            statistics,
            layout,
            cache,
            reference,
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn hierarchy(&self) -> &ModelHierarchy {
        &self.hierarchy
    }

    pub fn statistics(&self) -> &[StudyStatistic] {
        &self.statistics
    }

    pub fn modes(&self) -> &[EstimatorMode] {
        &self.modes
    }

    fn budget_entries(&self) -> Vec<Option<f64>> {
        match &self.config.budgets {
            Some(b) => b.iter().map(|&b| Some(b)).collect(),
            None => vec![None],
        }
    }

    /// Reference values for `key`, from the configured file or closed form.
    pub fn reference(&self, key: &str) -> Result<Vec<f64>> {
        reference_for(&self.hierarchy, self.reference.as_ref(), key)
    }

    /// Fail unless every requested statistic has a reference.
    pub fn require_reference(&self) -> Result<()> {
        for s in &self.statistics {
            self.reference(s.label())?;
        }
        Ok(())
    }

    fn allocation_weights(&self, stat: &StudyStatistic) -> Vec<f64> {
        match stat.stat.layout() {
            BlockLayout::Plain => self.hierarchy.output_weights().to_vec(),
            BlockLayout::Sobol => self.config.sobol_weights.clone().unwrap_or_else(|| {
                vec![1.0; self.hierarchy.output_len() * self.hierarchy.input_dim()]
            }),
        }
    }

    fn effective_costs(&self, layout: BlockLayout) -> Result<CostModel> {
        let blocks = layout.num_blocks(self.hierarchy.input_dim());
        Ok(CostModel::new(self.hierarchy.costs())?.scaled(self.config.sobol_cost.multiplier(blocks)))
    }

    /// Cost of the pilot runs behind `mode`.
    pub fn pilot_cost(&self, mode: EstimatorMode) -> f64 {
        let per_row: f64 = self.hierarchy.costs().iter().sum();
        let blocks = self.layout.num_blocks(self.hierarchy.input_dim());
        let mult = self.config.sobol_cost.multiplier(blocks);
        let (n_rho, n_g) = self.config.pilot_split(mode);
        let pilot_rows = match mode {
            EstimatorMode::Linear => self.config.pilot_size,
            EstimatorMode::Nonlinear => n_rho,
        };
        per_row * (pilot_rows as f64 * mult + n_g as f64)
    }

    pub fn pilot_data(&self, replicate: u64) -> Result<PilotData> {
        let h = &self.hierarchy;
        let cache = self.cache.as_ref();
        let evals = pilot_evaluations(h, self.layout, self.config.pilot_size, self.config.seed, replicate, cache)?;
        let bridge = if self.modes.contains(&EstimatorMode::Nonlinear) {
            let (_, n_g) = self.config.pilot_split(EstimatorMode::Nonlinear);
            let set = draw_inputs_on_stream(
                h.distributions(),
                n_g,
                self.config.seed,
                stream_id(replicate, Purpose::Training),
            );
            let all: Vec<usize> = (0..h.num_models()).collect();
            let training =
                evaluate_models_on_blocks(h, &[&set], &all, &vec![n_g; all.len()], cache)?;
            Some(RegressionBridge::fit(&training, self.config.regressor)?)
        } else {
            None
        };
        Ok(PilotData { evals, bridge })
    }

    /// Pilot statistics of `stat` under `mode`.
    pub fn pilot_stats(
        &self,
        data: &PilotData,
        stat: &dyn Statistic,
        mode: EstimatorMode,
    ) -> Result<PilotStats> {
        let (n, _) = self.config.pilot_split(mode);
        match mode {
            EstimatorMode::Linear if stat.label() == "expectation" => {
                estimate_moment_stats(&data.evals, n)
            }
            EstimatorMode::Linear => estimate_q_stats(&data.evals, stat, n),
            EstimatorMode::Nonlinear => {
                let bridge = data.bridge.as_ref().ok_or(MfmcError::NotFitted)?;
                estimate_g_stats(&data.evals, bridge, stat, n)
            }
        }
    }

    /// Optimal plan for `stat` from pilot statistics at budget entry
    /// `budget_index` (`budget` is `None` in tolerance mode).
    pub fn plan(
        &self,
        stat: &StudyStatistic,
        mode: EstimatorMode,
        stats: &PilotStats,
        budget_index: usize,
        budget: Option<f64>,
    ) -> Result<PlanSummary> {
        let costs = self.effective_costs(stat.stat.layout())?;
        let weights = self.allocation_weights(stat);
        let agg = aggregate_vector_stats(stats, &weights)?;
        let w1 = self.hierarchy.costs()[0];
        let total = match (budget, self.config.budget_unit) {
            (Some(p), BudgetUnit::HfEquivalent) => p * w1,
            (Some(b), BudgetUnit::Absolute) => b,
            (None, _) => {
                let eps = self
                    .config
                    .tolerance
                    .ok_or_else(|| config_error("set exactly one of budgets and tolerance"))?;
                budget_for_tolerance(&agg, &costs, eps)?
            }
        };
        let pilot_cost = self.pilot_cost(mode);
        let estimation_budget = if self.config.fold_pilot_cost {
            total - pilot_cost
        } else {
            total
        };
        let options = AllocationOptions {
            weights: Some(weights),
            min_samples: stat.stat.min_samples(),
        };
        let plan = optimal_allocation_with(stats, &costs, estimation_budget, &options)?;
        let k = stats.num_models();
        let rmse_by_models = (1..=k)
            .map(|j| {
                let models: Vec<usize> = (0..j).collect();
                let sub_costs = CostModel::new(costs.w()[..j].to_vec())?;
                let p = optimal_allocation_with(&stats.subset(&models), &sub_costs, estimation_budget, &options)?;
                Ok(p.predicted_mse.sqrt())
            })
            .map(|r: Result<f64>| r.unwrap_or(f64::NAN))
            .collect();
        let mc_samples = (estimation_budget / costs.w()[0]).floor();
        Ok(PlanSummary {
            statistic: stat.label().to_string(),
            mode,
            budget_index,
            budget_hf: total / w1,
            estimation_budget,
            pilot_cost,
            rho_bar: agg.rho_bar_sq.iter().map(|r| r.sqrt()).collect(),
            rmse_by_models,
            mc_predicted_mse: agg.sigma_bar_sq / mc_samples,
            plan,
        })
    }

    /// Evaluate the plan on the estimation streams of `replicate`.
    pub fn estimate(
        &self,
        replicate: u64,
        stat: &StudyStatistic,
        data: &PilotData,
        stats_mode: EstimatorMode,
        summary: PlanSummary,
    ) -> Result<ReplicateRecord> {
        let h = &self.hierarchy;
        let seed = self.config.seed;
        let plan = &summary.plan;
        let max_m = plan.m.iter().copied().max().unwrap_or(0);
        let base_stream = stream_id(replicate, Purpose::Estimation);
        let evals = match stat.stat.layout() {
            BlockLayout::Plain => {
                let set = draw_inputs_on_stream(h.distributions(), max_m, seed, base_stream);
                evaluate_selected(h, &[&set], &plan.m, self.cache.as_ref())?
            }
            BlockLayout::Sobol => {
                let block = build_sobol_block_on_streams(
                    h.distributions(),
                    max_m,
                    seed,
                    base_stream,
                    stream_id(replicate, Purpose::EstimationSecond),
                )?;
                evaluate_selected(h, &block.blocks(), &plan.m, self.cache.as_ref())?
            }
        };
        let bridge = match stats_mode {
            EstimatorMode::Linear => None,
            EstimatorMode::Nonlinear => Some(data.bridge.as_ref().ok_or(MfmcError::NotFitted)?),
        };
        let report = match (&stat.sobol, bridge) {
            (Some(family), bridge) => {
                let pooled = match bridge {
                    None => estimate_q_stats(&data.evals, &PooledVariance, self.config.pilot_split(stats_mode).0)?,
                    Some(b) => estimate_g_stats(&data.evals, b, &PooledVariance, self.config.pilot_split(stats_mode).0)?,
                };
                mfmc_sobol(&evals, plan, family, optimal_alpha(&pooled), bridge)?
            }
            (None, None) => mfmc_statistic(&evals, plan, stat.stat.as_ref())?,
            (None, Some(b)) => mfmc_nonlinear_statistic(&evals, plan, b, stat.stat.as_ref())?,
        };
        let plan_cost = report.realized_cost;
        let realized_cost = if self.config.fold_pilot_cost {
            plan_cost + summary.pilot_cost
        } else {
            plan_cost
        };
        Ok(ReplicateRecord {
            replicate,
            allocation: summary,
            values: report.values,
            normalized: report.normalized,
            plan_cost,
            realized_cost,
        })
    }

    /// Plans of one replicate for every statistic, mode and budget.
    pub fn replicate_plans(&self, replicate: u64) -> Result<(PilotData, Vec<(usize, PlanSummary)>)> {
        let data = self.pilot_data(replicate)?;
        let mut out = Vec::new();
        for (s, stat) in self.statistics.iter().enumerate() {
            for &mode in &self.modes {
                let stats = self.pilot_stats(&data, stat.stat.as_ref(), mode)?;
                for (b, budget) in self.budget_entries().into_iter().enumerate() {
                    out.push((s, self.plan(stat, mode, &stats, b, budget)?));
                }
            }
        }
        Ok((data, out))
    }

    pub fn run_replicate(&self, replicate: u64) -> Result<Vec<ReplicateRecord>> {
        let (data, plans) = self.replicate_plans(replicate)?;
        plans
            .into_iter()
            .map(|(s, summary)| {
                let mode = summary.mode;
                self.estimate(replicate, &self.statistics[s], &data, mode, summary)
            })
            .collect()
    }

    /// Every replicate, in parallel, ordered by replicate index.
    pub fn run(&self) -> Result<StudyResults> {
        let work = || -> Result<Vec<Vec<ReplicateRecord>>> {
            (0..self.config.replicates as u64)
                .into_par_iter()
                .map(|r| self.run_replicate(r))
                .collect()
        };
        let per_replicate = match self.config.jobs {
            Some(n) => thread_pool(n)?.install(work)?,
            None => work()?,
        };
        Ok(StudyResults {
            records: per_replicate.into_iter().flatten().collect(),
        })
    }

    fn group_records<'a>(
        &self,
        results: &'a StudyResults,
    ) -> Vec<(&StudyStatistic, EstimatorMode, usize, Vec<&'a ReplicateRecord>)> {
        let mut groups = Vec::new();
        for stat in &self.statistics {
            for &mode in &self.modes {
                for b in 0..self.budget_entries().len() {
                    let recs: Vec<&ReplicateRecord> = results
                        .records
                        .iter()
                        .filter(|r| {
                            r.allocation.statistic == stat.label()
                                && r.allocation.mode == mode
                                && r.allocation.budget_index == b
                        })
                        .collect();
                    if !recs.is_empty() {
                        groups.push((stat, mode, b, recs));
                    }
                }
            }
        }
        groups
    }

    pub fn summarize(&self, results: &StudyResults) -> StudySummary {
        let groups = self
            .group_records(results)
            .into_iter()
            .map(|(stat, mode, _, recs)| self.group_summary(stat, mode, &recs))
            .collect();
        StudySummary {
            hierarchy: self.hierarchy.label().to_string(),
            models: self.hierarchy.models().iter().map(|m| m.label().to_string()).collect(),
            costs: self.hierarchy.costs(),
            seed: self.config.seed,
            replicates: self.config.replicates,
            pilot_size: self.config.pilot_size,
            budget_unit: self.config.budget_unit,
            fold_pilot_cost: self.config.fold_pilot_cost,
            sobol_cost: self.config.sobol_cost,
            groups,
        }
    }

    fn group_summary(
        &self,
        stat: &StudyStatistic,
        mode: EstimatorMode,
        recs: &[&ReplicateRecord],
    ) -> GroupSummary {
        let weights = self.allocation_weights(stat);
        let values: Vec<&[f64]> = recs.iter().map(|r| r.values.as_slice()).collect();
        let (mean_v, se) = mean_and_se(&values);
        let reference = self.reference(stat.label()).ok();
        let (empirical_mse, relative_mse) = match &reference {
            Some(r) => {
                let (mse, rel) = weighted_mse(&values, r, &weights);
                (Some(mse), Some(rel))
            }
            None => (None, None),
        };
        let normalized: Option<Vec<&[f64]>> = recs
            .iter()
            .map(|r| r.normalized.as_deref())
            .collect::<Option<Vec<_>>>();
        let (normalized_mean, normalized_standard_error, normalized_reference, normalized_empirical_mse) =
            match normalized {
                Some(n) if stat.sobol.is_some() => {
                    let (m, s) = mean_and_se(&n);
                    let r = self.reference(&format!("{}{NORMALIZED_SUFFIX}", stat.label())).ok();
                    let mse = r.as_ref().map(|r| weighted_mse(&n, r, &weights).0);
                    (Some(m), Some(s), r, mse)
                }
                _ => (None, None, None, None),
            };
        let k = self.hierarchy.num_models();
        let col_mean = |f: &dyn Fn(&ReplicateRecord) -> Vec<f64>| -> Vec<f64> {
            let rows: Vec<Vec<f64>> = recs.iter().map(|r| f(r)).collect();
            (0..rows[0].len())
                .map(|i| mean(&rows.iter().map(|row| row[i]).collect::<Vec<_>>()))
                .collect()
        };
        let mean_m = col_mean(&|r| r.allocation.plan.m.iter().map(|&m| m as f64).collect());
        let n_comp = recs[0].allocation.plan.alpha[0].len();
        let mean_alpha = (0..k)
            .map(|i| {
                (0..n_comp)
                    .map(|c| mean(&recs.iter().map(|r| r.allocation.plan.alpha[i][c]).collect::<Vec<_>>()))
                    .collect()
            })
            .collect();
        let sum = |f: &dyn Fn(&ReplicateRecord) -> f64| -> f64 { recs.iter().map(|r| f(r)).sum() };
        GroupSummary {
            statistic: stat.label().to_string(),
            mode,
            budget: sum(&|r| r.allocation.budget_hf) / recs.len() as f64,
            replicates: recs.len(),
            mean: mean_v,
            standard_error: se,
            reference,
            empirical_mse,
            relative_mse,
            predicted_mse: sum(&|r| r.allocation.plan.predicted_mse) / recs.len() as f64,
            mc_predicted_mse: sum(&|r| r.allocation.mc_predicted_mse) / recs.len() as f64,
            normalized_mean,
            normalized_standard_error,
            normalized_reference,
            normalized_empirical_mse,
            mean_m,
            mean_alpha,
            mean_rho_bar: col_mean(&|r| r.allocation.rho_bar.clone()),
            mean_rmse_by_models: col_mean(&|r| r.allocation.rmse_by_models.clone()),
            total_plan_cost: sum(&|r| r.plan_cost),
            total_pilot_cost: sum(&|r| r.allocation.pilot_cost),
            total_realized_cost: sum(&|r| r.realized_cost),
        }
    }

    /// Plain-text allocation tables, one per group, with replicate means.
    pub fn allocation_table(&self, summary: &StudySummary) -> String {
        let mut out = String::new();
        for g in &summary.groups {
            let header = format!(
                "statistic={}  mode={}  budget={}  replicates={}",
                g.statistic,
                g.mode.label(),
                fmt_num(g.budget),
                g.replicates
            );
            let m: Vec<f64> = g.mean_m.clone();
            self.write_table(&mut out, &header, g.mode, &m, &g.mean_alpha, &g.mean_rho_bar, &g.mean_rmse_by_models);
        }
        out
    }

    /// Allocation tables of single plans.
    pub fn plan_table(&self, plans: &[PlanSummary]) -> String {
        let mut out = String::new();
        for p in plans {
            let header = format!(
                "statistic={}  mode={}  budget={}",
                p.statistic,
                p.mode.label(),
                fmt_num(p.budget_hf)
            );
            let m: Vec<f64> = p.plan.m.iter().map(|&m| m as f64).collect();
            self.write_table(&mut out, &header, p.mode, &m, &p.plan.alpha, &p.rho_bar, &p.rmse_by_models);
        }
        out
    }

    #[allow(clippy::too_many_arguments)]
    fn write_table(
        &self,
        out: &mut String,
        header: &str,
        mode: EstimatorMode,
        m: &[f64],
        alpha: &[Vec<f64>],
        rho: &[f64],
        rmse: &[f64],
    ) {
        let _ = writeln!(out, "# {}  {header}", self.hierarchy.label());
        let rho_label = match mode {
            EstimatorMode::Linear => "rho",
            EstimatorMode::Nonlinear => "rho_g",
        };
        let _ = writeln!(
            out,
            "{:<12} {:>10} {:>12} {:>28} {:>10} {:>12}",
            "model", "cost", "m", "alpha", rho_label, "rmse_k"
        );
        let costs = self.hierarchy.costs();
        for (i, model) in self.hierarchy.models().iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<12} {:>10} {:>12.2} {:>28} {:>10.4} {:>12.4e}",
                model.label(),
                fmt_num(costs[i]),
                m[i],
                fmt_alpha(&alpha[i]),
                rho[i],
                rmse[i]
            );
        }
        out.push('\n');
    }

    /// Per-replicate CSV for `mode`: one row per estimate component.
    pub fn replicates_csv(&self, results: &StudyResults, mode: EstimatorMode) -> String {
        let mut out = String::from("replicate,budget,statistic,component,value,predicted_mse,realized_cost\n");
        for r in results.records.iter().filter(|r| r.allocation.mode == mode) {
            let a = &r.allocation;
            for (c, v) in r.values.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{c},{},{},{}",
                    r.replicate,
                    fmt_float(a.budget_hf),
                    a.statistic,
                    fmt_float(*v),
                    fmt_float(a.plan.predicted_mse),
                    fmt_float(r.realized_cost)
                );
            }
            for (c, v) in r.normalized.iter().flatten().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{}{NORMALIZED_SUFFIX},{c},{},,{}",
                    r.replicate,
                    fmt_float(a.budget_hf),
                    a.statistic,
                    fmt_float(*v),
                    fmt_float(r.realized_cost)
                );
            }
        }
        out
    }

    /// MSE-versus-budget rows. `relative_mse` divides by the weighted squared
    /// norm of the reference.
    pub fn sweep_csv(&self, summary: &StudySummary) -> String {
        let mut out = String::from(
            "budget,statistic,mode,empirical_mse,relative_mse,predicted_mse,replicates\n",
        );
        for g in &summary.groups {
            let opt = |v: Option<f64>| v.map(fmt_float).unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                fmt_float(g.budget),
                g.statistic,
                g.mode.label(),
                opt(g.empirical_mse),
                opt(g.relative_mse),
                fmt_float(g.predicted_mse),
                g.replicates
            );
            if let Some(mse) = g.normalized_empirical_mse {
                let _ = writeln!(
                    out,
                    "{},{}{NORMALIZED_SUFFIX},{},{},,,{}",
                    fmt_float(g.budget),
                    g.statistic,
                    g.mode.label(),
                    fmt_float(mse),
                    g.replicates
                );
            }
        }
        out
    }

    /// Write the allocation table, per-replicate CSVs, summary JSON and,
    /// when `with_sweep`, the sweep CSV into `dir`. Returns the written paths.
    pub fn write_reports(
        &self,
        results: &StudyResults,
        dir: &Path,
        with_sweep: bool,
    ) -> Result<Vec<PathBuf>> {
        std::fs::create_dir_all(dir)?;
        let summary = self.summarize(results);
        let mut files = vec![(dir.join("allocation.txt"), self.allocation_table(&summary))];
        for &mode in &self.modes {
            files.push((
                dir.join(format!("replicates_{}.csv", mode.label())),
                self.replicates_csv(results, mode),
            ));
        }
        files.push((dir.join("summary.json"), serde_json::to_string_pretty(&summary)? + "\n"));
        if with_sweep {
            files.push((dir.join("sweep.csv"), self.sweep_csv(&summary)));
        }
        for (path, text) in &files {
            std::fs::write(path, text)?;
        }
        Ok(files.into_iter().map(|(p, _)| p).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudyResults {
    /// Replicate-major; within a replicate ordered by statistic, mode, budget.
    pub records: Vec<ReplicateRecord>,
}

fn mean_and_se(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let cols = rows[0].len();
    (0..cols)
        .map(|c| {
            let col: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let m = mean(&col);
            let se = if rows.len() > 1 {
                (crate::numerics::sample_variance(&col) / n).sqrt()
            } else {
                f64::NAN
            };
            (m, se)
        })
        .unzip()
}

/// Replicate average of the weighted squared error, and that divided by the
/// weighted squared norm of the reference.
fn weighted_mse(rows: &[&[f64]], reference: &[f64], weights: &[f64]) -> (f64, f64) {
    let errs: Vec<f64> = rows
        .iter()
        .map(|r| {
            r.iter()
                .zip(reference)
                .zip(weights)
                .map(|((v, t), w)| w * (v - t) * (v - t))
                .sum()
        })
        .collect();
    let mse = mean(&errs);
    let norm: f64 = reference.iter().zip(weights).map(|(t, w)| w * t * t).sum();
    (mse, mse / norm)
}

/// Local worker pool with `threads` threads.
pub fn thread_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MfmcError::InvalidInput(e.to_string()))
}

/// 17 significant digits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_num(x: f64) -> String {
    if x == x.trunc() && x.abs() < 1e15 {
        format!("{x:.0}")
    } else {
        format!("{x:.4}")
    }
}

fn fmt_alpha(a: &[f64]) -> String {
    if a.len() <= 3 {
        a.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
    } else {
        format!("mean {:.4}", mean(a))
    }
}

/// Kind of statistics behind a mode, for labelling pilot files.
pub fn stats_kind(stat: &dyn Statistic, mode: EstimatorMode) -> StatsKind {
    match mode {
        EstimatorMode::Nonlinear => StatsKind::GTransformed,
        EstimatorMode::Linear if stat.label() == "expectation" => StatsKind::Raw,
        EstimatorMode::Linear => StatsKind::QTransformed,
    }
}
