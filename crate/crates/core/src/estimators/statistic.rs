//! Pluggable statistics.
//!
//! A [`Statistic`] provides a single-level estimator `q_hat` evaluated on the
//! first `n` rows of a model's output blocks, and a per-sample contribution
//! `q` whose sample moments drive the allocation. The multifidelity
//! combination itself is generic over the statistic.

use std::fmt;

use crate::error::{MfmcError, Result};
use crate::numerics::{mean, pairwise_sum, sample_variance};
use crate::sampling::OutputMatrix;

use super::single_level::{main_effect, total_effect};

/// Which input blocks a statistic needs per sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BlockLayout {
    /// One input set `s`.
    Plain,
    /// `s`, `s'` and one mixed set per input coordinate.
    Sobol,
}

impl BlockLayout {
    pub fn num_blocks(self, input_dim: usize) -> usize {
        match self {
            BlockLayout::Plain => 1,
            BlockLayout::Sobol => input_dim + 2,
        }
    }
}

pub trait Statistic: Send + Sync + fmt::Debug {
    fn label(&self) -> &str;

    fn layout(&self) -> BlockLayout;

    /// Smallest prefix on which the single-level estimator is defined.
    fn min_samples(&self) -> usize;

    fn num_components(&self, output_len: usize, input_dim: usize) -> usize;

    /// Single-level estimate on the first `n` rows of every block.
    fn estimate(&self, blocks: &[OutputMatrix], n: usize) -> Vec<f64>;

    /// Per-sample contributions over the first `n` rows, `[component][row]`.
    fn contributions(&self, blocks: &[OutputMatrix], n: usize) -> Vec<Vec<f64>>;
}

fn check_blocks(stat: &dyn Statistic, blocks: &[OutputMatrix], n: usize) {
    assert!(!blocks.is_empty(), "{}: no output blocks", stat.label());
    assert!(
        blocks.iter().all(|b| b.rows() >= n),
        "{}: fewer than {n} rows",
        stat.label()
    );
}

/// Mean of each output component.
#[derive(Debug, Clone, Copy, Default)]
pub struct Expectation;

impl Statistic for Expectation {
    fn label(&self) -> &str {
        "expectation"
    }
    fn layout(&self) -> BlockLayout {
        BlockLayout::Plain
    }
    fn min_samples(&self) -> usize {
        1
    }
    fn num_components(&self, output_len: usize, _input_dim: usize) -> usize {
        output_len
    }
    fn estimate(&self, blocks: &[OutputMatrix], n: usize) -> Vec<f64> {
        check_blocks(self, blocks, n);
        blocks[0].prefix_mean(n)
    }
    fn contributions(&self, blocks: &[OutputMatrix], n: usize) -> Vec<Vec<f64>> {
        check_blocks(self, blocks, n);
        (0..blocks[0].cols())
            .map(|j| blocks[0].column_prefix(j, n))
            .collect()
    }
}

/// Unbiased variance of each output component. The per-sample contribution
/// is the square deviation from the model's own pilot mean.
#[derive(Debug, Clone, Copy, Default)]
pub struct Variance;

impl Statistic for Variance {
    fn label(&self) -> &str {
        "variance"
    }
    fn layout(&self) -> BlockLayout {
        BlockLayout::Plain
    }
    fn min_samples(&self) -> usize {
        2
    }
    fn num_components(&self, output_len: usize, _input_dim: usize) -> usize {
        output_len
    }
    fn estimate(&self, blocks: &[OutputMatrix], n: usize) -> Vec<f64> {
        check_blocks(self, blocks, n);
        (0..blocks[0].cols())
            .map(|j| sample_variance(&blocks[0].column_prefix(j, n)))
            .collect()
    }
    fn contributions(&self, blocks: &[OutputMatrix], n: usize) -> Vec<Vec<f64>> {
        check_blocks(self, blocks, n);
        (0..blocks[0].cols())
            .map(|j| {
                let col = blocks[0].column_prefix(j, n);
                let mu = mean(&col);
                col.iter().map(|v| (v - mu) * (v - mu)).collect()
            })
            .collect()
    }
}

/// Which family of Sobol indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SobolFamily {
    Main,
    Total,
}

/// Variance-scaled Sobol indices of every input coordinate, as one vector
/// of `d * output_len` components ordered `output * d + coordinate`.
#[derive(Debug, Clone, Copy)]
pub struct SobolIndices {
    family: SobolFamily,
}

impl SobolIndices {
    pub fn main() -> Self {
        Self {
            family: SobolFamily::Main,
        }
    }

    pub fn total() -> Self {
        Self {
            family: SobolFamily::Total,
        }
    }

    pub fn family(&self) -> SobolFamily {
        self.family
    }
}

fn sobol_columns(blocks: &[OutputMatrix], out: usize, n: usize) -> (Vec<f64>, Vec<f64>) {
    (blocks[0].column_prefix(out, n), blocks[1].column_prefix(out, n))
}

impl Statistic for SobolIndices {
    fn label(&self) -> &str {
        match self.family {
            SobolFamily::Main => "sobol-main",
            SobolFamily::Total => "sobol-total",
        }
    }
    fn layout(&self) -> BlockLayout {
        BlockLayout::Sobol
    }
    fn min_samples(&self) -> usize {
        2
    }
    fn num_components(&self, output_len: usize, input_dim: usize) -> usize {
        output_len * input_dim
    }
    fn estimate(&self, blocks: &[OutputMatrix], n: usize) -> Vec<f64> {
        check_blocks(self, blocks, n);
        let d = blocks.len() - 2;
        let mut values = Vec::with_capacity(d * blocks[0].cols());
        for out in 0..blocks[0].cols() {
            let (base, second) = sobol_columns(blocks, out, n);
            for j in 0..d {
                let mixed = blocks[2 + j].column_prefix(out, n);
                values.push(match self.family {
                    SobolFamily::Main => main_effect(&base, &second, &mixed),
                    SobolFamily::Total => total_effect(&second, &mixed),
                });
            }
        }
        values
    }
    fn contributions(&self, blocks: &[OutputMatrix], n: usize) -> Vec<Vec<f64>> {
        check_blocks(self, blocks, n);
        let d = blocks.len() - 2;
        let mut rows = Vec::with_capacity(d * blocks[0].cols());
        for out in 0..blocks[0].cols() {
            let (base, second) = sobol_columns(blocks, out, n);
            let mu = 0.5 * (mean(&base) + mean(&second));
            for j in 0..d {
                let mixed = blocks[2 + j].column_prefix(out, n);
                rows.push(match self.family {
                    SobolFamily::Main => base
                        .iter()
                        .zip(&mixed)
                        .map(|(a, b)| (a - mu) * (b - mu))
                        .collect(),
                    SobolFamily::Total => second
                        .iter()
                        .zip(&mixed)
                        .map(|(a, b)| 0.5 * (a - b) * (a - b))
                        .collect(),
                });
            }
        }
        rows
    }
}

/// Variance pooled over the two independent Sobol base sets,
/// `(V(s) + V(s')) / 2`; the normalizer of the Sobol indices.
#[derive(Debug, Clone, Copy, Default)]
pub struct PooledVariance;

impl Statistic for PooledVariance {
    fn label(&self) -> &str {
        "pooled-variance"
    }
    fn layout(&self) -> BlockLayout {
        BlockLayout::Sobol
    }
    fn min_samples(&self) -> usize {
        2
    }
    fn num_components(&self, output_len: usize, _input_dim: usize) -> usize {
        output_len
    }
    fn estimate(&self, blocks: &[OutputMatrix], n: usize) -> Vec<f64> {
        check_blocks(self, blocks, n);
        (0..blocks[0].cols())
            .map(|out| {
                let (base, second) = sobol_columns(blocks, out, n);
                0.5 * (sample_variance(&base) + sample_variance(&second))
            })
            .collect()
    }
    fn contributions(&self, blocks: &[OutputMatrix], n: usize) -> Vec<Vec<f64>> {
        check_blocks(self, blocks, n);
        (0..blocks[0].cols())
            .map(|out| {
                let (base, second) = sobol_columns(blocks, out, n);
                let mu_a = mean(&base);
                let mu_b = mean(&second);
                base.iter()
                    .zip(&second)
                    .map(|(a, b)| 0.5 * ((a - mu_a).powi(2) + (b - mu_b).powi(2)))
                    .collect()
            })
            .collect()
    }
}

/// Names accepted by [`statistic_by_name`].
pub const STATISTIC_NAMES: [&str; 4] = ["expectation", "variance", "sobol-main", "sobol-total"];

pub fn statistic_by_name(name: &str) -> Result<Box<dyn Statistic>> {
    match name {
        "expectation" => Ok(Box::new(Expectation)),
        "variance" => Ok(Box::new(Variance)),
        "sobol-main" => Ok(Box::new(SobolIndices::main())),
        "sobol-total" => Ok(Box::new(SobolIndices::total())),
        other => Err(MfmcError::UnknownStatistic(other.to_string())),
    }
}

/// Mean of the contributions; for statistics whose estimator is an exact
/// sample mean of `q` this reproduces [`Statistic::estimate`].
pub fn contribution_mean(stat: &dyn Statistic, blocks: &[OutputMatrix], n: usize) -> Vec<f64> {
    stat.contributions(blocks, n)
        .iter()
        .map(|q| pairwise_sum(q) / n as f64)
        .collect()
}
