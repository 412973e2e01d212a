//! Small numerical kernels shared by the retriever, the losses and the index.

use crate::error::{Error, Result};

/// Tolerance used when checking that a vector of probabilities sums to one.
pub const DISTRIBUTION_TOLERANCE: f64 = 1e-9;

pub fn check_temperature(temperature: f64) -> Result<()> {
    if temperature > 0.0 && temperature.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidTemperature(temperature))
    }
}

/// Temperature softmax, stabilized by subtracting the maximum.
///
/// `-inf` entries receive zero mass. At least one entry must be finite, and
/// no entry may be `+inf` or NaN.
pub fn softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_temperature(temperature)?;
    if scores.is_empty() {
        return Err(Error::EmptyInput);
    }
    if scores.iter().any(|s| s.is_nan() || *s == f64::INFINITY) {
        return Err(Error::NonFinite("scores"));
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::NonFinite("scores"));
    }
    let exps: Vec<f64> = scores
        .iter()
        .map(|s| ((s - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Logarithm of [`softmax`], finite wherever the scores are, even when the
/// probability itself underflows.
pub fn log_softmax(scores: &[f64], temperature: f64) -> Result<Vec<f64>> {
    softmax(scores, temperature)?;
    let scaled: Vec<f64> = scores.iter().map(|s| s / temperature).collect();
    let lse = log_sum_exp(&scaled);
    Ok(scaled.into_iter().map(|s| s - lse).collect())
}

/// `ln Σ exp(x_i)`, stabilized.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn validate_distribution(probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(Error::InvalidDistribution(format!(
            "entry {p} outside [0, 1]"
        )));
    }
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() > DISTRIBUTION_TOLERANCE {
        return Err(Error::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(())
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
}

/// Sequential single-precision dot product. Every exact-search path in the
/// index uses this kernel so that sharded and brute-force scans agree bitwise.
#[inline]
pub fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

pub fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}
