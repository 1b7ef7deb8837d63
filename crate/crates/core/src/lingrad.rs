//! Linear regression trainers driven by per-environment full-batch gradients.
//!
//! All trainers start from zero weights and zero bias. At each step the
//! per-environment MSE gradients are averaged; ERM applies the average to
//! every weight, CGLearn applies it only to weights whose gradients agree
//! across environments (see [`crate::consistency`]). The bias is always
//! updated.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyStats;
use crate::dataset::{EnvironmentSet, TabularDataset};
use crate::error::{invalid, Error, Result};

pub const DEFAULT_THRESHOLDS: [f64; 5] = [0.25, 1.0, 4.0, 16.0, 64.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub weights: Array1<f64>,
    pub bias: f64,
}

impl LinearModel {
    pub fn zeros(d: usize) -> Self {
        Self {
            weights: Array1::zeros(d),
            bias: 0.0,
        }
    }

    pub fn predict(&self, features: ndarray::ArrayView2<'_, f64>) -> Array1<f64> {
        features.dot(&self.weights) + self.bias
    }

    pub fn mse(&self, env: &TabularDataset) -> f64 {
        let r = self.predict(env.features()) - env.target();
        r.dot(&r) / r.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }
}

/// Gradient-descent step size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    /// Constant learning rate.
    Fixed(f64),
    /// `factor / L`, where `L` is the largest eigenvalue of the
    /// environment-averaged MSE Hessian of the training environments.
    InverseCurvature(f64),
}

impl Default for StepSize {
    fn default() -> Self {
        StepSize::Fixed(1e-2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub step_size: StepSize,
    pub steps: usize,
    /// Candidate consistency thresholds for [`select_threshold`].
    pub thresholds: Vec<f64>,
    /// Record the consistency mask every `k` steps (CGLearn only).
    pub trace_every: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            step_size: StepSize::default(),
            steps: 5000,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            trace_every: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match self.step_size {
            StepSize::Fixed(lr) | StepSize::InverseCurvature(lr) if !(lr >= 0.0 && lr.is_finite()) => {
                return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")))
            }
            _ => {}
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if let Some(t) = self.thresholds.iter().find(|t| !(**t >= 0.0)) {
            return Err(Error::Config(format!("threshold {t} must be non-negative")));
        }
        if self.trace_every == Some(0) {
            return Err(Error::Config("trace_every must be positive".into()));
        }
        Ok(())
    }
}

/// Diagnostics from a CGLearn run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    /// `(step, mask)` pairs sampled every `trace_every` steps.
    pub masks: Vec<(usize, Vec<bool>)>,
    /// How many steps each weight was updated.
    pub update_counts: Vec<usize>,
    pub final_env_losses: Vec<f64>,
}

/// Row `i` is the full-batch MSE gradient on environment `i`; the last
/// column is the bias gradient.
pub fn env_gradients(model: &LinearModel, envs: &EnvironmentSet) -> Result<Array2<f64>> {
    let d = model.weights.len();
    if envs.n_features() != d {
        return Err(invalid(format!(
            "model has {d} weights but environments have {} features",
            envs.n_features()
        )));
    }
    if !envs.task().is_regression() {
        return Err(invalid("linear trainers support regression only"));
    }
    let mut out = Array2::zeros((envs.len(), d + 1));
    for (i, env) in envs.iter().enumerate() {
        if env.is_empty() {
            return Err(invalid(format!("environment {i} is empty")));
        }
        let n = env.n_rows() as f64;
        let r = model.predict(env.features()) - env.target();
        let gw = env.features().t().dot(&r) * (2.0 / n);
        out.row_mut(i).slice_mut(ndarray::s![..d]).assign(&gw);
        out[[i, d]] = 2.0 / n * r.sum();
    }
    Ok(out)
}

/// Sufficient statistics of one environment for squared-error losses.
#[derive(Debug, Clone)]
struct EnvMoments {
    n: f64,
    xtx: Array2<f64>,
    xty: Array1<f64>,
    x_sum: Array1<f64>,
    y_sum: f64,
    yty: f64,
}

impl EnvMoments {
    fn new(env: &TabularDataset) -> Self {
        let x = env.features();
        let y = env.target();
        Self {
            n: env.n_rows() as f64,
            xtx: x.t().dot(&x),
            xty: x.t().dot(&y),
            x_sum: x.sum_axis(ndarray::Axis(0)),
            y_sum: y.sum(),
            yty: y.dot(&y),
        }
    }

    /// `(X w + b)ᵀ(X w + b)` and `(X w + b)ᵀ y`, plus `Xᵀ(X w + b)` and `Σ(X w + b)`.
    fn prediction_moments(&self, w: &Array1<f64>, b: f64) -> (f64, f64, Array1<f64>, f64) {
        // Plain loops keep the summation order fixed, so results do not
        // depend on how the arrays happen to be laid out in memory.
        let d = w.len();
        let mut xtf = Array1::zeros(d);
        for i in 0..d {
            let mut acc = self.x_sum[i] * b;
            for j in 0..d {
                acc += self.xtx[[i, j]] * w[j];
            }
            xtf[i] = acc;
        }
        let sum_f = dot(&self.x_sum, w) + self.n * b;
        let ftf = dot(w, &xtf) + b * sum_f;
        let fty = dot(w, &self.xty) + b * self.y_sum;
        (ftf, fty, xtf, sum_f)
    }

    fn loss(&self, w: &Array1<f64>, b: f64) -> f64 {
        let (ftf, fty, _, _) = self.prediction_moments(w, b);
        ((ftf - 2.0 * fty + self.yty) / self.n).max(0.0)
    }

    /// Writes `[∂L/∂w, ∂L/∂b]` into `out`.
    fn gradient_into(&self, w: &Array1<f64>, b: f64, mut out: ndarray::ArrayViewMut1<'_, f64>) {
        let d = w.len();
        let (_, _, xtf, sum_f) = self.prediction_moments(w, b);
        let scale = 2.0 / self.n;
        for j in 0..d {
            out[j] = scale * (xtf[j] - self.xty[j]);
        }
        out[d] = scale * (sum_f - self.y_sum);
    }

    /// IRMv1 penalty term `g = ∂/∂s MSE(s·f)|_{s=1}` and its gradient.
    fn irm_term(&self, w: &Array1<f64>, b: f64) -> (f64, Array1<f64>, f64) {
        let (ftf, fty, xtf, sum_f) = self.prediction_moments(w, b);
        let scale = 2.0 / self.n;
        let g = scale * (ftf - fty);
        let dg_dw = (xtf * 2.0 - &self.xty) * scale;
        let dg_db = scale * (2.0 * sum_f - self.y_sum);
        (g, dg_dw, dg_db)
    }
}

fn dot(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn moments(envs: &EnvironmentSet) -> Result<Vec<EnvMoments>> {
    if !envs.task().is_regression() {
        return Err(invalid("linear trainers support regression only"));
    }
    envs.iter()
        .enumerate()
        .map(|(i, env)| {
            if env.is_empty() {
                Err(invalid(format!("environment {i} is empty")))
            } else {
                Ok(EnvMoments::new(env))
            }
        })
        .collect()
}

/// Largest eigenvalue of the environment-averaged Hessian of the MSE in `(w, b)`.
pub fn max_curvature(envs: &EnvironmentSet) -> Result<f64> {
    let moms = moments(envs)?;
    Ok(max_curvature_of(&moms))
}

fn max_curvature_of(moms: &[EnvMoments]) -> f64 {
    let d = moms[0].xty.len();
    let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
    for m in moms {
        let s = 2.0 / m.n / moms.len() as f64;
        for i in 0..d {
            for j in 0..d {
                h[(i, j)] += s * m.xtx[[i, j]];
            }
            h[(i, d)] += s * m.x_sum[i];
            h[(d, i)] += s * m.x_sum[i];
        }
        h[(d, d)] += s * m.n;
    }
    h.symmetric_eigenvalues().max()
}

fn learning_rate(cfg: &TrainConfig, moms: &[EnvMoments]) -> f64 {
    match cfg.step_size {
        StepSize::Fixed(lr) => lr,
        StepSize::InverseCurvature(f) => {
            let l = max_curvature_of(moms);
            if l > 0.0 {
                f / l
            } else {
                0.0
            }
        }
    }
}

enum Rule {
    Erm,
    CgLearn(f64),
    Irm(f64),
}

fn column_means(grads: &Array2<f64>) -> Array1<f64> {
    let m = grads.nrows() as f64;
    grads.columns().into_iter().map(|c| c.iter().sum::<f64>() / m).collect()
}

fn irm_objective(moms: &[EnvMoments], w: &Array1<f64>, b: f64, lambda: f64) -> f64 {
    let m = moms.len() as f64;
    moms.iter()
        .map(|mom| {
            let (g, _, _) = mom.irm_term(w, b);
            mom.loss(w, b) + lambda * g * g
        })
        .sum::<f64>()
        / m
}

/// Backtracking (Armijo) step for the IRMv1 objective. The penalty is quartic
/// in the weights, so the MSE curvature step alone can overshoot.
fn irm_step(moms: &[EnvMoments], model: &LinearModel, grad: &Array1<f64>, lambda: f64, lr: f64) -> f64 {
    let d = model.weights.len();
    let f0 = irm_objective(moms, &model.weights, model.bias, lambda);
    let g2 = dot(grad, grad);
    let mut eta = lr;
    for _ in 0..60 {
        let w = Array1::from_shape_fn(d, |j| model.weights[j] - eta * grad[j]);
        let f = irm_objective(moms, &w, model.bias - eta * grad[d], lambda);
        if f.is_finite() && f <= f0 - 0.5 * eta * g2 {
            return eta;
        }
        eta *= 0.5;
    }
    eta
}

fn descend(
    envs: &EnvironmentSet,
    cfg: &TrainConfig,
    rule: Rule,
) -> Result<(LinearModel, TrainTrace)> {
    cfg.validate()?;
    let moms = moments(envs)?;
    let d = envs.n_features();
    let m = moms.len();
    let lr = learning_rate(cfg, &moms);
    let mut model = LinearModel::zeros(d);
    let mut grads = Array2::<f64>::zeros((m, d + 1));
    let mut trace = TrainTrace {
        masks: Vec::new(),
        update_counts: vec![0; d],
        final_env_losses: Vec::new(),
    };

    for step in 0..cfg.steps {
        for (i, mom) in moms.iter().enumerate() {
            mom.gradient_into(&model.weights, model.bias, grads.row_mut(i));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        let mut mu = column_means(&grads);
        let mask = match rule {
            Rule::Erm => None,
            Rule::CgLearn(threshold) => {
                let stats = ConsistencyStats::from_env_values(
                    grads.slice(ndarray::s![.., ..d]),
                    threshold,
                )?;
                Some(stats.mask)
            }
            Rule::Irm(lambda) => {
                if lambda > 0.0 {
                    for mom in &moms {
                        let (g, dg_dw, dg_db) = mom.irm_term(&model.weights, model.bias);
                        let s = lambda * 2.0 * g / m as f64;
                        for j in 0..d {
                            mu[j] += s * dg_dw[j];
                        }
                        mu[d] += s * dg_db;
                    }
                }
                None
            }
        };
        if let (Some(k), Some(mask)) = (cfg.trace_every, &mask) {
            if step % k == 0 {
                trace.masks.push((step, mask.clone()));
            }
        }
        let eta = match rule {
            Rule::Irm(lambda) if lambda > 0.0 => irm_step(&moms, &model, &mu, lambda, lr),
            _ => lr,
        };
        for j in 0..d {
            if mask.as_ref().is_none_or(|mk| mk[j]) {
                model.weights[j] -= eta * mu[j];
                trace.update_counts[j] += 1;
            }
        }
        model.bias -= eta * mu[d];
        if !model.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "non-finite parameters".into(),
            });
        }
    }
    trace.final_env_losses = moms
        .iter()
        .map(|mom| mom.loss(&model.weights, model.bias))
        .collect();
    if trace.final_env_losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::Divergence {
            step: cfg.steps,
            reason: "non-finite loss".into(),
        });
    }
    Ok((model, trace))
}

/// Plain gradient descent on the environment-averaged MSE.
pub fn train_erm(envs: &EnvironmentSet, cfg: &TrainConfig) -> Result<LinearModel> {
    descend(envs, cfg, Rule::Erm).map(|(m, _)| m)
}

/// Gradient descent where weight `j` moves only while its per-environment
/// gradients pass the consistency test at `threshold`.
pub fn train_cglearn(
    envs: &EnvironmentSet,
    cfg: &TrainConfig,
    threshold: f64,
) -> Result<(LinearModel, TrainTrace)> {
    if envs.len() < 2 {
        return Err(invalid("CGLearn needs at least two environments"));
    }
    if !(threshold >= 0.0) {
        return Err(invalid(format!("threshold must be non-negative, got {threshold}")));
    }
    descend(envs, cfg, Rule::CgLearn(threshold))
}

/// Linear IRMv1: mean risk plus `penalty_weight` times the mean squared
/// gradient of each environment's risk with respect to a scalar output scale.
pub fn train_irmv1(
    envs: &EnvironmentSet,
    cfg: &TrainConfig,
    penalty_weight: f64,
) -> Result<LinearModel> {
    if envs.len() < 2 {
        return Err(invalid("IRMv1 needs at least two environments"));
    }
    if !(penalty_weight >= 0.0) {
        return Err(invalid("penalty weight must be non-negative"));
    }
    descend(envs, cfg, Rule::Irm(penalty_weight)).map(|(m, _)| m)
}

/// Per-environment IRMv1 penalties `(∂/∂s MSE_e(s·f)|_{s=1})²`.
pub fn irm_penalties(model: &LinearModel, envs: &EnvironmentSet) -> Result<Vec<f64>> {
    Ok(moments(envs)?
        .iter()
        .map(|m| {
            let (g, _, _) = m.irm_term(&model.weights, model.bias);
            g * g
        })
        .collect())
}

/// Per-environment MSE.
pub fn env_losses(model: &LinearModel, envs: &EnvironmentSet) -> Vec<f64> {
    envs.iter().map(|e| model.mse(e)).collect()
}

/// Outcome of one threshold candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub threshold: f64,
    pub validation_mse: f64,
}

/// Trains one CGLearn model per candidate threshold and keeps the one with
/// the lowest validation MSE (ties go to the smaller threshold).
pub fn select_threshold(
    train_envs: &EnvironmentSet,
    validation_env: &TabularDataset,
    cfg: &TrainConfig,
) -> Result<(f64, LinearModel, Vec<CandidateScore>)> {
    let mut candidates = cfg.thresholds.clone();
    if candidates.is_empty() {
        return Err(Error::Config("threshold candidate list is empty".into()));
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let fits: Vec<(f64, LinearModel, f64)> = candidates
        .par_iter()
        .map(|&t| {
            let (model, _) = train_cglearn(train_envs, cfg, t)?;
            let mse = model.mse(validation_env);
            Ok((t, model, mse))
        })
        .collect::<Result<_>>()?;
    let scores = fits
        .iter()
        .map(|(t, _, mse)| CandidateScore {
            threshold: *t,
            validation_mse: *mse,
        })
        .collect();
    let mut best = 0;
    for (i, fit) in fits.iter().enumerate() {
        if fit.2 < fits[best].2 {
            best = i;
        }
    }
    let (t, model, _) = fits.into_iter().nth(best).expect("non-empty candidates");
    Ok((t, model, scores))
}

/// MSE of a linear model on one environment, evaluated from explicit
/// parameters; used by finite-difference checks.
pub fn mse_at(weights: ArrayView1<'_, f64>, bias: f64, env: &TabularDataset) -> f64 {
    let r = env.features().dot(&weights) + bias - env.target();
    r.dot(&r) / r.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{normal, seeded};
    use crate::synthgen::generate_two_feature_demo;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn env(x: Array2<f64>, y: Array1<f64>) -> TabularDataset {
        TabularDataset::regression(x, y).unwrap()
    }

    fn random_env(seed: u64, n: usize, d: usize) -> TabularDataset {
        let mut rng = seeded(seed);
        let x = Array2::from_shape_fn((n, d), |_| normal(&mut rng));
        let y = Array1::from_shape_fn(n, |_| normal(&mut rng));
        env(x, y)
    }

    fn cfg(lr: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            step_size: StepSize::Fixed(lr),
            steps,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let x = ndarray::array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let model = LinearModel {
            weights: ndarray::array![1.5, -2.0],
            bias: 0.25,
        };
        let y = model.predict(x.view());
        let envs = EnvironmentSet::new(vec![env(x, y)]).unwrap();
        let g = env_gradients(&model, &envs).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn closed_form_gradient_at_zero() {
        // y = 2x with x standardized: dL/dw = -(2/n) Σ x·2x = -4 · mean(x²) = -4.
        let x = ndarray::array![-1.5, -0.5, 0.5, 1.5];
        let x = &x / x.std(0.0);
        let y = &x * 2.0;
        let envs = EnvironmentSet::new(vec![env(x.insert_axis(ndarray::Axis(1)), y)]).unwrap();
        let g = env_gradients(&LinearModel::zeros(1), &envs).unwrap();
        assert_relative_eq!(g[[0, 0]], -4.0, max_relative = 1e-12);
        assert_relative_eq!(g[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn moments_gradient_matches_residual_gradient() {
        let envs = EnvironmentSet::new(vec![random_env(1, 30, 4), random_env(2, 17, 4)]).unwrap();
        let model = LinearModel {
            weights: ndarray::array![0.3, -1.0, 2.0, 0.1],
            bias: -0.7,
        };
        let direct = env_gradients(&model, &envs).unwrap();
        for (i, mom) in moments(&envs).unwrap().iter().enumerate() {
            let mut row = Array1::zeros(5);
            mom.gradient_into(&model.weights, model.bias, row.view_mut());
            for j in 0..5 {
                assert_relative_eq!(row[j], direct[[i, j]], max_relative = 1e-10, epsilon = 1e-12);
            }
            assert_relative_eq!(
                mom.loss(&model.weights, model.bias),
                model.mse(envs.get(i).unwrap()),
                max_relative = 1e-10
            );
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for seed in 0..20 {
            let e = random_env(seed, 25, 3);
            let mut rng = seeded(1000 + seed);
            let model = LinearModel {
                weights: Array1::from_shape_fn(3, |_| normal(&mut rng)),
                bias: normal(&mut rng),
            };
            let envs = EnvironmentSet::new(vec![e.clone()]).unwrap();
            let g = env_gradients(&model, &envs).unwrap();
            let h = 1e-5;
            for j in 0..=3 {
                let (mut wp, mut wm) = (model.weights.clone(), model.weights.clone());
                let (mut bp, mut bm) = (model.bias, model.bias);
                if j < 3 {
                    wp[j] += h;
                    wm[j] -= h;
                } else {
                    bp += h;
                    bm -= h;
                }
                let fd = (mse_at(wp.view(), bp, &e) - mse_at(wm.view(), bm, &e)) / (2.0 * h);
                assert_relative_eq!(g[[0, j]], fd, max_relative = 1e-6, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn erm_recovers_noiseless_slope() {
        let x = ndarray::array![-1.5, -0.5, 0.5, 1.5, 0.0];
        let x = (&x / x.std(0.0)).insert_axis(ndarray::Axis(1));
        let y = x.column(0).to_owned() * 2.0;
        let envs = EnvironmentSet::new(vec![env(x, y)]).unwrap();
        let m = train_erm(&envs, &TrainConfig::default()).unwrap();
        assert!((m.weights[0] - 2.0).abs() < 1e-3);
        assert!(m.bias.abs() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let envs = EnvironmentSet::new(vec![random_env(3, 20, 2)]).unwrap();
        assert_eq!(train_erm(&envs, &cfg(0.0, 50)).unwrap(), LinearModel::zeros(2));
    }

    #[test]
    fn duplicated_environment_matches_single() {
        let e = random_env(4, 40, 3);
        let one = EnvironmentSet::new(vec![e.clone()]).unwrap();
        let two = EnvironmentSet::new(vec![e.clone(), e]).unwrap();
        let c = cfg(0.05, 300);
        assert_eq!(train_erm(&one, &c).unwrap(), train_erm(&two, &c).unwrap());
        // identical copies: σ = 0, so the ratio is |μ|/ε and passes any
        // threshold well below 1/ε while the gradient is not yet negligible
        let short = cfg(0.05, 30);
        let (cg, trace) = train_cglearn(&two, &short, 1.0).unwrap();
        assert_eq!(trace.update_counts, vec![30; 3]);
        assert_eq!(cg, train_erm(&one, &short).unwrap());
    }

    fn demo_envs(seed: u64) -> EnvironmentSet {
        generate_two_feature_demo(&[0.2, 2.0, 5.0], 500, seed).unwrap()
    }

    #[test]
    fn threshold_zero_equals_erm() {
        let envs = demo_envs(0);
        let c = cfg(0.01, 500);
        let (cg, trace) = train_cglearn(&envs, &c, 0.0).unwrap();
        assert_eq!(cg, train_erm(&envs, &c).unwrap());
        assert_eq!(trace.update_counts, vec![500, 500]);
    }

    #[test]
    fn huge_threshold_freezes_weights() {
        let envs = demo_envs(1);
        let (m, trace) = train_cglearn(&envs, &cfg(0.01, 200), 1e300).unwrap();
        assert_eq!(m.weights, Array1::<f64>::zeros(2));
        assert_eq!(trace.update_counts, vec![0, 0]);
    }

    #[test]
    fn demo_masks_spurious_feature() {
        let train = demo_envs(2).subset(&[0, 1]).unwrap();
        let c = TrainConfig {
            step_size: StepSize::InverseCurvature(1.0),
            ..TrainConfig::default()
        };
        let (m, _) = train_cglearn(&train, &c, 4.0).unwrap();
        assert!(m.weights[1].abs() < 0.05, "{m:?}");
        assert!((m.weights[0] - 1.0).abs() < 0.1, "{m:?}");
        let erm = train_erm(&train, &c).unwrap();
        assert!(erm.weights[1].abs() > 0.1);
    }

    #[test]
    fn trace_sampling() {
        let envs = demo_envs(3);
        let c = TrainConfig {
            trace_every: Some(10),
            ..cfg(0.01, 95)
        };
        let (_, trace) = train_cglearn(&envs, &c, 1.0).unwrap();
        assert_eq!(trace.masks.len(), 10);
        assert_eq!(trace.masks[3].0, 30);
        assert_eq!(trace.final_env_losses.len(), 3);
    }

    #[test]
    fn irm_with_zero_penalty_is_erm() {
        let envs = demo_envs(4);
        let c = cfg(0.01, 400);
        let irm = train_irmv1(&envs, &c, 0.0).unwrap();
        let erm = train_erm(&envs, &c).unwrap();
        for (a, b) in irm.weights.iter().zip(&erm.weights) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn irm_penalty_shrinks_spurious_weight() {
        let envs = demo_envs(5).subset(&[0, 1]).unwrap();
        let c = TrainConfig {
            step_size: StepSize::Fixed(1e-3),
            steps: 20000,
            ..TrainConfig::default()
        };
        let erm = train_erm(&envs, &c).unwrap();
        let irm = train_irmv1(&envs, &c, 10.0).unwrap();
        assert!(irm.weights[1].abs() < erm.weights[1].abs(), "{irm:?} vs {erm:?}");
        let p = irm_penalties(&irm, &envs).unwrap();
        assert!(p.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn irm_penalty_gradient_matches_differences() {
        let envs = EnvironmentSet::new(vec![random_env(6, 30, 3)]).unwrap();
        let mom = &moments(&envs).unwrap()[0];
        let w = ndarray::array![0.4, -0.2, 1.1];
        let b = 0.3;
        let (_, dw, db) = mom.irm_term(&w, b);
        let h = 1e-6;
        for j in 0..3 {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[j] += h;
            wm[j] -= h;
            let fd = (mom.irm_term(&wp, b).0 - mom.irm_term(&wm, b).0) / (2.0 * h);
            assert_relative_eq!(dw[j], fd, max_relative = 1e-6);
        }
        let fd = (mom.irm_term(&w, b + h).0 - mom.irm_term(&w, b - h).0) / (2.0 * h);
        assert_relative_eq!(db, fd, max_relative = 1e-6);
    }

    #[test]
    fn selection_is_argmin_with_small_ties() {
        let envs = demo_envs(7);
        let train = envs.subset(&[0, 1]).unwrap();
        let val = envs.get(2).unwrap();
        let c = cfg(0.01, 300);
        let (t, model, scores) = select_threshold(&train, val, &c).unwrap();
        let best = scores.iter().map(|s| s.validation_mse).fold(f64::INFINITY, f64::min);
        assert_eq!(model.mse(val), best);
        let first = scores.iter().find(|s| s.validation_mse == best).unwrap();
        assert_eq!(first.threshold, t);

        let single = TrainConfig {
            thresholds: vec![4.0],
            ..c.clone()
        };
        assert_eq!(select_threshold(&train, val, &single).unwrap().0, 4.0);
        let none = TrainConfig {
            thresholds: vec![],
            ..c
        };
        assert!(matches!(select_threshold(&train, val, &none), Err(Error::Config(_))));
    }

    #[test]
    fn divergence_reports_step() {
        let envs = demo_envs(8);
        match train_erm(&envs, &cfg(1e3, 5000)) {
            Err(Error::Divergence { step, .. }) => assert!(step < 5000),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn invalid_inputs() {
        let one = EnvironmentSet::new(vec![random_env(9, 10, 2)]).unwrap();
        assert!(train_cglearn(&one, &cfg(0.01, 10), 1.0).is_err());
        assert!(train_irmv1(&one, &cfg(0.01, 10), 1.0).is_err());
        assert!(train_erm(&one, &cfg(-1.0, 10)).is_err());
        assert!(train_erm(&one, &cfg(0.01, 0)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn updated_sets_shrink_with_threshold(seed in 0u64..1000, t1 in 0.0f64..4.0, dt in 0.0f64..8.0) {
            let envs = EnvironmentSet::new(vec![
                random_env(seed, 15, 3),
                random_env(seed + 1, 15, 3),
                random_env(seed + 2, 15, 3),
            ]).unwrap();
            let mut rng = seeded(seed);
            let model = LinearModel {
                weights: Array1::from_shape_fn(3, |_| normal(&mut rng)),
                bias: 0.0,
            };
            let g = env_gradients(&model, &envs).unwrap();
            let g = g.slice(ndarray::s![.., ..3]);
            let lo = ConsistencyStats::from_env_values(g, t1).unwrap().mask;
            let hi = ConsistencyStats::from_env_values(g, t1 + dt).unwrap().mask;
            for (a, b) in lo.iter().zip(&hi) {
                prop_assert!(!*b || *a);
            }
        }

        #[test]
        fn always_masked_weights_are_untouched(seed in 0u64..1000) {
            let envs = EnvironmentSet::new(vec![random_env(seed, 20, 3), random_env(seed + 7, 20, 3)]).unwrap();
            let (m, trace) = train_cglearn(&envs, &cfg(0.05, 100), 3.0).unwrap();
            for j in 0..3 {
                if trace.update_counts[j] == 0 {
                    prop_assert_eq!(m.weights[j].to_bits(), 0.0f64.to_bits());
                }
            }
        }
    }
}
