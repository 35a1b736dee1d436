//! Small numerical kernels shared by the estimators and the pilot statistics.

const PAIRWISE_BLOCK: usize = 64;

/// Pairwise (cascade) summation. Error grows as O(log n) instead of O(n),
/// which matters for the 10^4..10^6 sample means of the cheapest models.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= PAIRWISE_BLOCK {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(values) / values.len() as f64
}

/// Unbiased sample variance, `1/(n-1) * sum (x - mean)^2`.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return f64::NAN;
    }
    let mu = mean(values);
    let sq: Vec<f64> = values.iter().map(|v| (v - mu) * (v - mu)).collect();
    pairwise_sum(&sq) / (n - 1) as f64
}

/// Unbiased sample covariance of two equally long series.
pub fn sample_covariance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "covariance of series with different lengths");
    let n = a.len();
    if n < 2 {
        return f64::NAN;
    }
    let ma = mean(a);
    let mb = mean(b);
    let prod: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    pairwise_sum(&prod) / (n - 1) as f64
}

/// `sin(pi * x)` that is exactly zero at integers and exactly +-1 at
/// half-integers, so grid points such as `x = 1` give bit-exact zeros.
pub fn sin_pi(x: f64) -> f64 {
    let r = x.rem_euclid(2.0);
    if r == 0.0 || r == 1.0 {
        return 0.0;
    }
    if r == 0.5 {
        return 1.0;
    }
    if r == 1.5 {
        return -1.0;
    }
    (std::f64::consts::PI * x).sin()
}

pub fn cos_pi(x: f64) -> f64 {
    sin_pi(x + 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_exact_integer_sum() {
        let v: Vec<f64> = (1..=10_000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&v), 50_005_000.0);
    }

    #[test]
    fn pairwise_beats_naive_on_small_increments() {
        let mut v = vec![1.0];
        v.extend(std::iter::repeat_n(1e-16, 1_000_000));
        let exact = 1.0 + 1e-10;
        let naive: f64 = v.iter().sum();
        assert!((pairwise_sum(&v) - exact).abs() < (naive - exact).abs());
    }

    #[test]
    fn variance_of_one_two_three() {
        assert_eq!(sample_variance(&[1.0, 2.0, 3.0]), 1.0);
        assert_eq!(sample_variance(&[4.0; 7]), 0.0);
        assert!(sample_variance(&[1.0]).is_nan());
    }

    #[test]
    fn sin_pi_exact_points() {
        assert_eq!(sin_pi(1.0), 0.0);
        assert_eq!(sin_pi(0.0), 0.0);
        assert_eq!(sin_pi(0.5), 1.0);
        assert_eq!(cos_pi(0.5), 0.0);
        assert_eq!(cos_pi(1.0), -1.0);
        assert!((sin_pi(0.25) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }
}
