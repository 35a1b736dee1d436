//! Reproducible input sampling and nested evaluation of a hierarchy.
//!
//! Every input row is generated from a ChaCha8 keystream addressed by
//! `(seed, stream, row)`, so a sample set of size `m` is always a prefix of
//! the set of size `m' > m`, and the rows do not depend on how work is split
//! across threads.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MfmcError, Result};
use crate::hierarchy::{InputDistribution, ModelHierarchy};
use crate::numerics::pairwise_sum;

/// Keystream words reserved for one input row.
const ROW_STRIDE_LOG2: u32 = 20;

/// What a sample stream is used for. Combined with a replicate index it
/// selects an independent ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Purpose {
    Estimation = 0,
    EstimationSecond = 1,
    Pilot = 2,
    PilotSecond = 3,
    Training = 4,
    Reference = 5,
    ReferenceSecond = 6,
}

/// Stream identifier for `(replicate, purpose)`.
pub fn stream_id(replicate: u64, purpose: Purpose) -> u64 {
    (replicate << 4) | purpose as u64
}

fn row_rng(seed: u64, stream: u64, row: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos((row as u128) << ROW_STRIDE_LOG2);
    rng
}

fn draw_coordinate(dist: &InputDistribution, rng: &mut ChaCha8Rng) -> f64 {
    match *dist {
        InputDistribution::Uniform { low, high } => low + (high - low) * rng.random::<f64>(),
        InputDistribution::Normal { mean, std_dev } => {
            let z: f64 = StandardNormal.sample(rng);
            mean + std_dev * z
        }
    }
}

/// Identifies where a sample set came from; doubles as part of the
/// evaluation-cache key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SampleTag {
    pub seed: u64,
    pub stream: u64,
    /// 0 for a drawn set, `j + 1` for the Sobol mix built from coordinate `j`.
    pub variant: u32,
}

/// `m x d` matrix of input rows.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    inputs: Vec<f64>,
    rows: usize,
    dim: usize,
    tag: SampleTag,
    distributions: Vec<InputDistribution>,
}

impl SampleSet {
    /// Wrap explicit rows (row-major). Mostly useful in tests.
    pub fn from_rows(
        inputs: Vec<f64>,
        dim: usize,
        tag: SampleTag,
        distributions: Vec<InputDistribution>,
    ) -> Result<Self> {
        if dim == 0 || inputs.len() % dim != 0 {
            return Err(MfmcError::InvalidInput(format!(
                "{} values do not form rows of length {dim}",
                inputs.len()
            )));
        }
        Ok(Self {
            rows: inputs.len() / dim,
            inputs,
            dim,
            tag,
            distributions,
        })
    }

    pub fn len(&self) -> usize {
        self.rows
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn tag(&self) -> SampleTag {
        self.tag
    }

    pub fn seed(&self) -> u64 {
        self.tag.seed
    }

    pub fn distributions(&self) -> &[InputDistribution] {
        &self.distributions
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.inputs
    }
}

/// Draw `m` rows on an explicit stream.
pub fn draw_inputs_on_stream(
    distributions: &[InputDistribution],
    m: usize,
    seed: u64,
    stream: u64,
) -> SampleSet {
    let dim = distributions.len();
    let mut inputs = vec![0.0; m * dim];
    inputs
        .par_chunks_mut(dim.max(1))
        .enumerate()
        .for_each(|(row, out)| {
            let mut rng = row_rng(seed, stream, row);
            for (o, dist) in out.iter_mut().zip(distributions) {
                *o = draw_coordinate(dist, &mut rng);
            }
        });
    SampleSet {
        inputs,
        rows: m,
        dim,
        tag: SampleTag {
            seed,
            stream,
            variant: 0,
        },
        distributions: distributions.to_vec(),
    }
}

/// Draw `m` i.i.d. rows from the hierarchy's input distribution on the
/// default estimation stream.
pub fn draw_inputs(hierarchy: &ModelHierarchy, m: usize, seed: u64) -> Result<SampleSet> {
    if m == 0 {
        return Err(MfmcError::InvalidInput("need at least one sample".into()));
    }
    Ok(draw_inputs_on_stream(
        hierarchy.distributions(),
        m,
        seed,
        stream_id(0, Purpose::Estimation),
    ))
}

/// Row-major `rows x cols` matrix of model outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl OutputMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(MfmcError::InvalidInput(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Scalar outputs, one per row.
    pub fn from_column(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }

    /// Component `j` of the first `n` rows.
    pub fn column_prefix(&self, j: usize, n: usize) -> Vec<f64> {
        (0..n).map(|i| self.data[i * self.cols + j]).collect()
    }

    /// Mean of each component over the first `n` rows (pairwise summed).
    pub fn prefix_mean(&self, n: usize) -> Vec<f64> {
        (0..self.cols)
            .map(|j| pairwise_sum(&self.column_prefix(j, n)) / n as f64)
            .collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn truncated(&self, n: usize) -> Self {
        Self {
            rows: n,
            cols: self.cols,
            data: self.data[..n * self.cols].to_vec(),
        }
    }
}

/// Base set `s`, second set `s'` and the mixed sets `y^j`, where row `i`
/// of `y^j` equals `s'_i` except for coordinate `j`, taken from `s_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct SobolSampleBlock {
    pub base: SampleSet,
    pub second: SampleSet,
    pub mixed: Vec<SampleSet>,
}

impl SobolSampleBlock {
    pub fn from_sets(base: SampleSet, second: SampleSet) -> Result<Self> {
        if base.len() != second.len() || base.dim() != second.dim() {
            return Err(MfmcError::InvalidInput(
                "base and second Sobol sets must have the same shape".into(),
            ));
        }
        let d = base.dim();
        let mixed = (0..d)
            .map(|j| {
                let mut data = second.inputs.clone();
                for i in 0..base.len() {
                    data[i * d + j] = base.inputs[i * d + j];
                }
                SampleSet {
                    inputs: data,
                    rows: base.len(),
                    dim: d,
                    tag: SampleTag {
                        variant: j as u32 + 1,
                        ..second.tag
                    },
                    distributions: second.distributions.clone(),
                }
            })
            .collect();
        Ok(Self {
            base,
            second,
            mixed,
        })
    }

    pub fn len(&self) -> usize {
        self.base.len()
    }

    pub fn is_empty(&self) -> bool {
        self.base.is_empty()
    }

    /// `[s, s', y^1, .., y^d]`, the block order used by the Sobol statistics.
    pub fn blocks(&self) -> Vec<&SampleSet> {
        let mut out = vec![&self.base, &self.second];
        out.extend(self.mixed.iter());
        out
    }

    /// Model evaluations needed per sample row, `d + 2`.
    pub fn evaluations_per_sample(&self) -> usize {
        self.mixed.len() + 2
    }
}

/// Sobol block on explicit streams for `s` and `s'`.
pub fn build_sobol_block_on_streams(
    distributions: &[InputDistribution],
    m: usize,
    seed: u64,
    base_stream: u64,
    second_stream: u64,
) -> Result<SobolSampleBlock> {
    let base = draw_inputs_on_stream(distributions, m, seed, base_stream);
    let second = draw_inputs_on_stream(distributions, m, seed, second_stream);
    SobolSampleBlock::from_sets(base, second)
}

pub fn build_sobol_block(
    hierarchy: &ModelHierarchy,
    m: usize,
    seed: u64,
) -> Result<SobolSampleBlock> {
    if m < 2 {
        return Err(MfmcError::TooFewSamples {
            required: 2,
            actual: m,
        });
    }
    build_sobol_block_on_streams(
        hierarchy.distributions(),
        m,
        seed,
        stream_id(0, Purpose::Estimation),
        stream_id(0, Purpose::EstimationSecond),
    )
}

/// How evaluation cost is charged when a statistic needs several input
/// blocks per sample (Sobol indices need `d + 2`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CostConvention {
    /// Every model evaluation is charged.
    #[default]
    PerEvaluation,
    /// One charge per sample row regardless of the number of blocks.
    PerSample,
}

impl CostConvention {
    pub fn multiplier(self, blocks: usize) -> f64 {
        match self {
            CostConvention::PerEvaluation => blocks as f64,
            CostConvention::PerSample => 1.0,
        }
    }
}

/// Outputs of the evaluated models on shared nested input prefixes.
///
/// Model `k` (original index `model_indices[k]`) was evaluated on the first
/// `counts[k]` rows of every input block.
#[derive(Debug, Clone, PartialEq)]
pub struct NestedEvaluations {
    model_indices: Vec<usize>,
    counts: Vec<usize>,
    costs: Vec<f64>,
    /// `[model][block]`
    outputs: Vec<Vec<OutputMatrix>>,
    input_dim: usize,
}

impl NestedEvaluations {
    /// Assemble evaluations from precomputed outputs. Validates shapes and
    /// nestedness.
    pub fn from_outputs(
        model_indices: Vec<usize>,
        costs: Vec<f64>,
        outputs: Vec<Vec<OutputMatrix>>,
        input_dim: usize,
    ) -> Result<Self> {
        if outputs.is_empty()
            || model_indices.len() != outputs.len()
            || costs.len() != outputs.len()
        {
            return Err(MfmcError::InvalidInput(
                "model indices, costs and outputs must have equal nonzero length".into(),
            ));
        }
        let n_blocks = outputs[0].len();
        let n_out = outputs[0].first().map_or(0, |b| b.cols());
        let mut counts = Vec::with_capacity(outputs.len());
        for blocks in &outputs {
            if blocks.len() != n_blocks || n_blocks == 0 {
                return Err(MfmcError::InvalidInput("inconsistent block count".into()));
            }
            let rows = blocks[0].rows();
            if blocks.iter().any(|b| b.rows() != rows || b.cols() != n_out) {
                return Err(MfmcError::InvalidInput("inconsistent block shapes".into()));
            }
            counts.push(rows);
        }
        validate_counts(&counts)?;
        Ok(Self {
            model_indices,
            counts,
            costs,
            outputs,
            input_dim,
        })
    }

    pub fn num_models(&self) -> usize {
        self.counts.len()
    }

    pub fn model_indices(&self) -> &[usize] {
        &self.model_indices
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn num_blocks(&self) -> usize {
        self.outputs[0].len()
    }

    pub fn output_len(&self) -> usize {
        self.outputs[0][0].cols()
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// All blocks of evaluated model `k` (position, not original index).
    pub fn model_outputs(&self, k: usize) -> &[OutputMatrix] {
        &self.outputs[k]
    }

    /// Block 0 of evaluated model `k`.
    pub fn outputs(&self, k: usize) -> &OutputMatrix {
        &self.outputs[k][0]
    }

    /// `sum_i w_i m_i`, charged per the convention.
    pub fn realized_cost(&self, convention: CostConvention) -> f64 {
        let mult = convention.multiplier(self.num_blocks());
        self.costs
            .iter()
            .zip(&self.counts)
            .map(|(w, &m)| w * m as f64 * mult)
            .sum()
    }

    /// Keep only the first `n` rows of every model.
    pub fn truncate(&self, n: usize) -> Result<Self> {
        if self.counts.iter().any(|&m| m < n) || n == 0 {
            return Err(MfmcError::TooFewSamples {
                required: n,
                actual: self.counts.iter().copied().min().unwrap_or(0),
            });
        }
        Ok(Self {
            counts: vec![n; self.counts.len()],
            outputs: self
                .outputs
                .iter()
                .map(|b| b.iter().map(|o| o.truncated(n)).collect())
                .collect(),
            ..self.clone()
        })
    }

    /// Apply `f` to the outputs of every model except the high-fidelity one.
    /// `f` receives the position of the model.
    pub fn map_low_fidelity(&self, f: impl Fn(usize, f64) -> Result<f64>) -> Result<Self> {
        let mut outputs = Vec::with_capacity(self.outputs.len());
        for (k, blocks) in self.outputs.iter().enumerate() {
            if k == 0 {
                outputs.push(blocks.clone());
                continue;
            }
            let mut mapped = Vec::with_capacity(blocks.len());
            for b in blocks {
                let data = b
                    .as_flat()
                    .iter()
                    .map(|&v| f(k, v))
                    .collect::<Result<Vec<f64>>>()?;
                mapped.push(OutputMatrix::new(b.rows(), b.cols(), data)?);
            }
            outputs.push(mapped);
        }
        Ok(Self {
            outputs,
            ..self.clone()
        })
    }
}

/// `m_1 >= 1`, nondecreasing.
fn validate_counts(counts: &[usize]) -> Result<()> {
    let ok = counts.first().is_some_and(|&m| m >= 1) && counts.windows(2).all(|w| w[0] <= w[1]);
    if ok {
        Ok(())
    } else {
        Err(MfmcError::InvalidAllocation(counts.to_vec()))
    }
}

fn evaluate_rows(
    hierarchy: &ModelHierarchy,
    model: usize,
    samples: &SampleSet,
    start: usize,
    end: usize,
) -> Result<Vec<f64>> {
    let n_out = hierarchy.output_len();
    let mut data = vec![0.0; (end - start) * n_out];
    let failure = data
        .par_chunks_mut(n_out)
        .enumerate()
        .filter_map(|(offset, out)| {
            let row = start + offset;
            hierarchy
                .evaluate_into(model, samples.row(row), row, out)
                .err()
                .map(|e| (row, e))
        })
        .min_by_key(|(row, _)| *row);
    match failure {
        Some((_, e)) => Err(e),
        None => Ok(data),
    }
}

/// Evaluate the listed models on nested prefixes of each input block.
///
/// `model_indices[k]` is evaluated on the first `counts[k]` rows of every
/// block. Counts must start at >= 1 and be nondecreasing.
pub fn evaluate_models_on_blocks(
    hierarchy: &ModelHierarchy,
    blocks: &[&SampleSet],
    model_indices: &[usize],
    counts: &[usize],
    cache: Option<&EvalCache>,
) -> Result<NestedEvaluations> {
    if model_indices.len() != counts.len() || model_indices.is_empty() {
        return Err(MfmcError::InvalidInput(
            "one count per evaluated model is required".into(),
        ));
    }
    if blocks.is_empty() {
        return Err(MfmcError::InvalidInput("no input blocks".into()));
    }
    validate_counts(counts)?;
    let max_m = *counts.last().expect("nonempty");
    for b in blocks {
        if b.len() < max_m {
            return Err(MfmcError::TooFewSamples {
                required: max_m,
                actual: b.len(),
            });
        }
        if b.dim() != hierarchy.input_dim() {
            return Err(MfmcError::InputLength {
                expected: hierarchy.input_dim(),
                actual: b.dim(),
            });
        }
    }
    let n_out = hierarchy.output_len();
    let mut outputs = Vec::with_capacity(model_indices.len());
    for (&model, &m) in model_indices.iter().zip(counts) {
        if model >= hierarchy.num_models() {
            return Err(MfmcError::InvalidInput(format!("no model {model}")));
        }
        let mut per_block = Vec::with_capacity(blocks.len());
        for block in blocks {
            let data = match cache {
                Some(cache) => {
                    let key = CacheKey::new(hierarchy, block.tag(), model);
                    let mut cached = cache.load(&key, n_out)?.unwrap_or_default();
                    let have = cached.len() / n_out;
                    if have < m {
                        let extra = evaluate_rows(hierarchy, model, block, have, m)
                            .map_err(|e| relabel(e, model))?;
                        cached.extend_from_slice(&extra);
                        cache.store(&key, n_out, &cached)?;
                    }
                    cached.truncate(m * n_out);
                    cached
                }
                None => {
                    evaluate_rows(hierarchy, model, block, 0, m).map_err(|e| relabel(e, model))?
                }
            };
            per_block.push(OutputMatrix::new(m, n_out, data)?);
        }
        outputs.push(per_block);
    }
    let costs = model_indices
        .iter()
        .map(|&i| hierarchy.model(i).cost())
        .collect();
    Ok(NestedEvaluations {
        model_indices: model_indices.to_vec(),
        counts: counts.to_vec(),
        costs,
        outputs,
        input_dim: hierarchy.input_dim(),
    })
}

fn relabel(e: MfmcError, model: usize) -> MfmcError {
    match e {
        MfmcError::NonFiniteOutput { sample, .. } => MfmcError::NonFiniteOutput { model, sample },
        other => other,
    }
}

/// Evaluate model `i` on the first `m_vec[i]` rows of `samples`.
///
/// Trailing models may have `m_i = 0` (dropped); interior zeros are
/// rejected.
pub fn evaluate_nested(
    hierarchy: &ModelHierarchy,
    samples: &SampleSet,
    m_vec: &[usize],
) -> Result<NestedEvaluations> {
    let (indices, counts) = retained_counts(hierarchy, m_vec)?;
    evaluate_models_on_blocks(hierarchy, &[samples], &indices, &counts, None)
}

/// As [`evaluate_nested`] but over every block of a Sobol sample block.
pub fn evaluate_nested_sobol(
    hierarchy: &ModelHierarchy,
    block: &SobolSampleBlock,
    m_vec: &[usize],
) -> Result<NestedEvaluations> {
    let (indices, counts) = retained_counts(hierarchy, m_vec)?;
    evaluate_models_on_blocks(hierarchy, &block.blocks(), &indices, &counts, None)
}

/// Evaluate the models with nonzero counts in `m_vec` on every block. Unlike
/// [`evaluate_nested`], interior models may be skipped (count 0), which is how
/// an allocation that drops a middle model is evaluated.
pub fn evaluate_selected(
    hierarchy: &ModelHierarchy,
    blocks: &[&SampleSet],
    m_vec: &[usize],
    cache: Option<&EvalCache>,
) -> Result<NestedEvaluations> {
    if m_vec.len() != hierarchy.num_models() || m_vec[0] == 0 {
        return Err(MfmcError::InvalidAllocation(m_vec.to_vec()));
    }
    let indices: Vec<usize> = (0..m_vec.len()).filter(|&i| m_vec[i] > 0).collect();
    let counts: Vec<usize> = indices.iter().map(|&i| m_vec[i]).collect();
    evaluate_models_on_blocks(hierarchy, blocks, &indices, &counts, cache)
}

fn retained_counts(
    hierarchy: &ModelHierarchy,
    m_vec: &[usize],
) -> Result<(Vec<usize>, Vec<usize>)> {
    if m_vec.len() != hierarchy.num_models() {
        return Err(MfmcError::InvalidInput(format!(
            "{} counts for {} models",
            m_vec.len(),
            hierarchy.num_models()
        )));
    }
    let retained = m_vec.iter().take_while(|&&m| m > 0).count();
    if retained == 0 || m_vec[retained..].iter().any(|&m| m > 0) {
        return Err(MfmcError::InvalidAllocation(m_vec.to_vec()));
    }
    Ok(((0..retained).collect(), m_vec[..retained].to_vec()))
}

/// Key of one cached output column: `(hierarchy, sample set, model)`.
/// Rows are stored contiguously, so the row index is the position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    pub hierarchy: String,
    pub tag: SampleTag,
    pub model: usize,
}

impl CacheKey {
    pub fn new(hierarchy: &ModelHierarchy, tag: SampleTag, model: usize) -> Self {
        Self {
            hierarchy: hierarchy.label().to_string(),
            tag,
            model,
        }
    }

    fn file_name(&self) -> String {
        let label: String = self
            .hierarchy
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
            .collect();
        format!(
            "{label}.s{}.t{}.v{}.m{}.bin",
            self.tag.seed, self.tag.stream, self.tag.variant, self.model
        )
    }
}

const CACHE_MAGIC: &[u8; 8] = b"MFMCEV01";

/// On-disk cache of model outputs. File layout: 8-byte magic, `u64` row
/// count, `u64` column count, then row-major little-endian `f64` values.
#[derive(Debug, Clone)]
pub struct EvalCache {
    dir: PathBuf,
}

impl EvalCache {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        fs::create_dir_all(dir.as_ref())?;
        Ok(Self {
            dir: dir.as_ref().to_path_buf(),
        })
    }

    fn path(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(key.file_name())
    }

    /// Flat row-major values, or `None` if nothing is cached for the key.
    pub fn load(&self, key: &CacheKey, cols: usize) -> Result<Option<Vec<f64>>> {
        let path = self.path(key);
        if !path.exists() {
            return Ok(None);
        }
        let mut bytes = Vec::new();
        fs::File::open(&path)?.read_to_end(&mut bytes)?;
        let corrupt = || MfmcError::InvalidInput(format!("corrupt cache file {}", path.display()));
        if bytes.len() < 24 || &bytes[..8] != CACHE_MAGIC {
            return Err(corrupt());
        }
        let rows = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let stored_cols = u64::from_le_bytes(bytes[16..24].try_into().expect("8 bytes")) as usize;
        if stored_cols != cols || bytes.len() != 24 + rows * cols * 8 {
            return Err(corrupt());
        }
        let values = bytes[24..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Some(values))
    }

    pub fn store(&self, key: &CacheKey, cols: usize, values: &[f64]) -> Result<()> {
        if cols == 0 || values.len() % cols != 0 {
            return Err(MfmcError::InvalidInput("ragged cache rows".into()));
        }
        let mut bytes = Vec::with_capacity(24 + values.len() * 8);
        bytes.extend_from_slice(CACHE_MAGIC);
        bytes.extend_from_slice(&((values.len() / cols) as u64).to_le_bytes());
        bytes.extend_from_slice(&(cols as u64).to_le_bytes());
        for v in values {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let tmp = self.path(key).with_extension("tmp");
        fs::File::create(&tmp)?.write_all(&bytes)?;
        fs::rename(tmp, self.path(key))?;
        Ok(())
    }
}
