//! Analytic gradients against central finite differences on random instances.

use ndarray::{Array1, Array2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::{default_feature_names, EnvironmentSet, TabularDataset, Task};
use crate::error::Result;
use crate::lingrad::{env_gradients, mse_at, LinearModel};
use crate::mlp::{env_backward, MlpModel, OutputHead};
use crate::rng::{derive_seed, normal, seeded, Rng};

pub const LINEAR_TOLERANCE: f64 = 1e-6;
pub const MLP_TOLERANCE: f64 = 1e-4;
/// Hidden pre-activations must stay this far from the ReLU kink.
pub const RELU_MARGIN: f64 = 1e-3;
const FD_STEP: f64 = 1e-5;
/// Denominator floor so that near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub model: String,
    pub instances: usize,
    pub parameters_checked: usize,
    pub max_relative_error: f64,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn random_matrix(rng: &mut Rng, n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| normal(rng))
}

/// Random linear regression problems with `d ≤ 6`, `n ≤ 40`.
pub fn check_linear(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..instances {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let d = rng.random_range(1..=6);
        let n = rng.random_range(5..=40);
        let x = random_matrix(&mut rng, n, d);
        let y = Array1::from_shape_fn(n, |_| 3.0 * normal(&mut rng));
        let env = TabularDataset::regression(x, y)?;
        let model = LinearModel {
            weights: Array1::from_shape_fn(d, |_| normal(&mut rng)),
            bias: normal(&mut rng),
        };
        let g = env_gradients(&model, &EnvironmentSet::new(vec![env.clone()])?)?;
        for j in 0..=d {
            let (mut wp, mut wm) = (model.weights.clone(), model.weights.clone());
            let (mut bp, mut bm) = (model.bias, model.bias);
            if j < d {
                wp[j] += FD_STEP;
                wm[j] -= FD_STEP;
            } else {
                bp += FD_STEP;
                bm -= FD_STEP;
            }
            let fd = (mse_at(wp.view(), bp, &env) - mse_at(wm.view(), bm, &env)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(g[[0, j]], fd));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        model: "linear".into(),
        instances,
        parameters_checked: checked,
        max_relative_error: worst,
        tolerance: LINEAR_TOLERANCE,
    })
}

/// Smallest `|pre-activation|` over every hidden unit and row.
pub fn relu_margin(model: &MlpModel, features: ndarray::ArrayView2<'_, f64>) -> f64 {
    let pre = model.pre_activations(features);
    pre[..pre.len() - 1]
        .iter()
        .flat_map(|z| z.iter())
        .fold(f64::INFINITY, |m, v| m.min(v.abs()))
}

fn random_mlp_instance(rng: &mut Rng, classification: bool) -> Result<(MlpModel, TabularDataset)> {
    let d = rng.random_range(1..=4);
    let n_hidden_layers = rng.random_range(1..=2);
    let hidden: Vec<usize> = (0..n_hidden_layers).map(|_| rng.random_range(1..=5)).collect();
    let k = if classification { rng.random_range(2..=3) } else { 1 };
    let head = if classification {
        OutputHead::Softmax
    } else {
        OutputHead::Linear
    };
    let model = MlpModel::init(d, &hidden, head, k, rng.random())?;
    // Rows are resampled until every hidden pre-activation clears the margin.
    let n = rng.random_range(2..=20);
    let mut rows = Vec::with_capacity(n * d);
    let mut kept = 0;
    let mut attempts = 0;
    while kept < n && attempts < 10_000 {
        attempts += 1;
        let row = random_matrix(rng, 1, d);
        if relu_margin(&model, row.view()) > RELU_MARGIN {
            rows.extend(row.iter());
            kept += 1;
        }
    }
    let x = Array2::from_shape_vec((kept, d), rows).expect("shape");
    let (y, task) = if classification {
        (
            Array1::from_shape_fn(kept, |i| (i % k) as f64),
            Task::Classification { n_classes: k },
        )
    } else {
        (Array1::from_shape_fn(kept, |_| normal(rng)), Task::Regression)
    };
    Ok((model, TabularDataset::new(x, y, default_feature_names(d), task)?))
}

/// Random small networks (`d ≤ 4`, hidden widths ≤ 5, `n ≤ 20`), alternating
/// regression and classification heads.
pub fn check_mlp(instances: usize, seed: u64) -> Result<GradCheckReport> {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in 0..instances {
        let mut rng = seeded(derive_seed(seed, i as u64));
        let (model, env) = random_mlp_instance(&mut rng, i % 2 == 1)?;
        let g = env_backward(&model, &env)?;
        let mut probe = model.clone();
        for l in 0..model.layer_weights.len() {
            for idx in ndarray::indices_of(&model.layer_weights[l]) {
                let w0 = model.layer_weights[l][idx];
                probe.layer_weights[l][idx] = w0 + FD_STEP;
                let up = probe.loss(&env)?;
                probe.layer_weights[l][idx] = w0 - FD_STEP;
                let down = probe.loss(&env)?;
                probe.layer_weights[l][idx] = w0;
                let fd = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(g.weights[l][idx], fd));
                checked += 1;
            }
            for b in 0..model.layer_biases[l].len() {
                let b0 = model.layer_biases[l][b];
                probe.layer_biases[l][b] = b0 + FD_STEP;
                let up = probe.loss(&env)?;
                probe.layer_biases[l][b] = b0 - FD_STEP;
                let down = probe.loss(&env)?;
                probe.layer_biases[l][b] = b0;
                let fd = (up - down) / (2.0 * FD_STEP);
                worst = worst.max(relative_error(g.biases[l][b], fd));
                checked += 1;
            }
        }
    }
    Ok(GradCheckReport {
        model: "mlp".into(),
        instances,
        parameters_checked: checked,
        max_relative_error: worst,
        tolerance: MLP_TOLERANCE,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_gradients_pass() {
        let r = check_linear(20, 1).unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.parameters_checked >= 40);
    }

    #[test]
    fn mlp_gradients_pass() {
        let r = check_mlp(20, 2).unwrap();
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-6).abs() < 1e-18);
    }

    #[test]
    fn margin_of_tiny_net() {
        let m = MlpModel {
            layer_weights: vec![ndarray::array![[1.0]], ndarray::array![[1.0]]],
            layer_biases: vec![ndarray::array![-0.25], ndarray::array![0.0]],
            hidden_activation: crate::mlp::Activation::Relu,
            output_head: OutputHead::Linear,
        };
        assert!((relu_margin(&m, ndarray::array![[0.0], [1.0]].view()) - 0.25).abs() < 1e-15);
    }
}
