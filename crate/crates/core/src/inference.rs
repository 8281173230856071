//! Normal-reference inference helpers shared by every estimator.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Two-sided 5% critical value.
pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    /// `estimate +/- 1.96 se`
    pub fn normal(estimate: f64, se: f64) -> Self {
        Self {
            lo: estimate - Z_95 * se,
            hi: estimate + Z_95 * se,
        }
    }

    pub fn contains(&self, value: f64) -> bool {
        self.lo <= value && value <= self.hi
    }

    pub fn contains_interval(&self, other: &Interval) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

pub fn standard_normal_cdf(x: f64) -> f64 {
    Normal::standard().cdf(x)
}

/// Two-sided normal p-value `2 Phi(-|est/se|)`. A zero standard error gives
/// 0 for a nonzero estimate and 1 otherwise.
pub fn normal_p_value(estimate: f64, se: f64) -> f64 {
    if !estimate.is_finite() || !se.is_finite() {
        return f64::NAN;
    }
    if se == 0.0 {
        return if estimate == 0.0 { 1.0 } else { 0.0 };
    }
    2.0 * standard_normal_cdf(-(estimate / se).abs())
}

/// Linear-interpolation sample quantile of already sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let h = (n - 1) as f64 * q.clamp(0.0, 1.0);
            let lo = h.floor() as usize;
            let hi = h.ceil() as usize;
            sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Sample standard deviation (n - 1 denominator) of the finite entries.
pub fn std_dev(values: &[f64]) -> f64 {
    let finite: Vec<f64> = values.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.len() < 2 {
        return f64::NAN;
    }
    let m = finite.iter().sum::<f64>() / finite.len() as f64;
    (finite.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (finite.len() - 1) as f64).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}
