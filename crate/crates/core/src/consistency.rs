//! Per-feature gradient consistency statistics.
//!
//! Given one scalar per environment for each feature (a raw gradient for
//! linear models, a first-layer gradient-row norm for MLPs), the statistics
//! are the across-environment mean, the population standard deviation, the
//! ratio `|mean| / (std + EPSILON)` and the binary mask `ratio >= threshold`.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Added to the standard deviation so zero-variance gradients get a finite,
/// very large ratio instead of a division by zero.
pub const EPSILON: f64 = 1e-12;

/// One feature's per-environment values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientSample<'a> {
    values: &'a [f64],
}

impl<'a> GradientSample<'a> {
    pub fn new(values: &'a [f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("gradient sample is empty"));
        }
        if values.len() < 2 {
            return Err(invalid(
                "gradient consistency needs at least two environments",
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(invalid(format!("non-finite gradient in environment {i}")));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn mean_gradient(sample: GradientSample<'_>) -> f64 {
    mean(sample.values)
}

/// Population (divisor `m`) standard deviation.
pub fn std_gradient(sample: GradientSample<'_>) -> f64 {
    let v = sample.values;
    population_std(v, mean(v))
}

pub fn consistency_ratio(mu: f64, sigma: f64) -> f64 {
    debug_assert!(sigma >= 0.0, "negative standard deviation {sigma}");
    mu.abs() / (sigma + EPSILON)
}

/// `mask[j] = ratios[j] >= threshold`.
pub fn consistency_mask(ratios: &[f64], threshold: f64) -> Vec<bool> {
    ratios.iter().map(|&r| r >= threshold).collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_std(v: &[f64], mu: f64) -> f64 {
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Statistics for every feature at one training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub ratio: Vec<f64>,
    pub mask: Vec<bool>,
    pub threshold: f64,
}

impl ConsistencyStats {
    /// Column-wise statistics of an `m x d` matrix (row = environment,
    /// column = feature).
    pub fn from_env_values(values: ArrayView2<'_, f64>, threshold: f64) -> Result<Self> {
        if !(threshold >= 0.0) {
            return Err(invalid(format!("threshold must be non-negative, got {threshold}")));
        }
        let d = values.ncols();
        let mut mu = Vec::with_capacity(d);
        let mut sigma = Vec::with_capacity(d);
        let mut column = Vec::with_capacity(values.nrows());
        for col in values.columns() {
            column.clear();
            column.extend(col.iter().copied());
            let sample = GradientSample::new(&column)?;
            mu.push(mean_gradient(sample));
            sigma.push(std_gradient(sample));
        }
        let ratio: Vec<f64> = mu
            .iter()
            .zip(&sigma)
            .map(|(&m, &s)| consistency_ratio(m, s))
            .collect();
        let mask = consistency_mask(&ratio, threshold);
        Ok(Self {
            mu,
            sigma,
            ratio,
            mask,
            threshold,
        })
    }

    pub fn n_active(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}
