//! Feed-forward network with hand-written backpropagation.
//!
//! CGLearn for MLPs applies the consistency test to the first layer only:
//! for every input feature `j`, the L2 norm of its outgoing first-layer
//! gradient row is computed per environment, and row `j` moves only while
//! those norms agree across environments. First-layer biases and all deeper
//! layers follow plain ERM updates.

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::consistency::ConsistencyStats;
use crate::dataset::{EnvironmentSet, TabularDataset, Task};
use crate::error::{invalid, Error, Result};
use crate::lingrad::{TrainTrace, DEFAULT_THRESHOLDS};
use crate::rng::seeded;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// Single linear output trained with MSE.
    Linear,
    /// Class probabilities trained with cross-entropy.
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    Mse,
    CrossEntropy,
}

impl OutputHead {
    pub fn loss(self) -> Loss {
        match self {
            OutputHead::Linear => Loss::Mse,
            OutputHead::Softmax => Loss::CrossEntropy,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    /// `layer_weights[l]` is `fan_in x fan_out`; row `j` of the first matrix
    /// holds every weight leaving input feature `j`.
    pub layer_weights: Vec<Array2<f64>>,
    pub layer_biases: Vec<Array1<f64>>,
    pub hidden_activation: Activation,
    pub output_head: OutputHead,
}

/// Gradients with the same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.layer_weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: model.layer_biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    /// Element-wise mean, accumulated in slice order.
    pub fn mean(grads: &[MlpGradients]) -> MlpGradients {
        let m = grads.len() as f64;
        let mut acc = grads[0].clone();
        for g in &grads[1..] {
            for (a, b) in acc.weights.iter_mut().zip(&g.weights) {
                *a += b;
            }
            for (a, b) in acc.biases.iter_mut().zip(&g.biases) {
                *a += b;
            }
        }
        for a in &mut acc.weights {
            a.mapv_inplace(|v| v / m);
        }
        for a in &mut acc.biases {
            a.mapv_inplace(|v| v / m);
        }
        acc
    }
}

impl MlpModel {
    /// Seeded uniform initialization in `±1/sqrt(fan_in)`.
    pub fn init(
        n_inputs: usize,
        hidden_sizes: &[usize],
        output_head: OutputHead,
        n_outputs: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_inputs == 0 || n_outputs == 0 || hidden_sizes.iter().any(|&h| h == 0) {
            return Err(invalid("layer sizes must be positive"));
        }
        let mut sizes = Vec::with_capacity(hidden_sizes.len() + 2);
        sizes.push(n_inputs);
        sizes.extend_from_slice(hidden_sizes);
        sizes.push(n_outputs);
        let mut rng = seeded(seed);
        let mut layer_weights = Vec::new();
        let mut layer_biases = Vec::new();
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            layer_weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || {
                rng.random_range(-bound..bound)
            }));
            layer_biases.push(Array1::from_shape_simple_fn(fan_out, || {
                rng.random_range(-bound..bound)
            }));
        }
        Ok(Self {
            layer_weights,
            layer_biases,
            hidden_activation: Activation::Relu,
            output_head,
        })
    }

    /// `[d, h1, ..., k]`.
    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![self.layer_weights[0].nrows()];
        sizes.extend(self.layer_weights.iter().map(|w| w.ncols()));
        sizes
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_weights[0].nrows()
    }

    pub fn n_outputs(&self) -> usize {
        self.layer_weights.last().map_or(0, |w| w.ncols())
    }

    pub fn is_finite(&self) -> bool {
        self.layer_weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.layer_biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn validate(&self) -> Result<()> {
        if self.layer_weights.is_empty() || self.layer_weights.len() != self.layer_biases.len() {
            return Err(invalid("weights and biases must pair up layer by layer"));
        }
        for (l, (w, b)) in self.layer_weights.iter().zip(&self.layer_biases).enumerate() {
            if w.ncols() != b.len() {
                return Err(invalid(format!("layer {l}: bias length mismatch")));
            }
            if l > 0 && self.layer_weights[l - 1].ncols() != w.nrows() {
                return Err(invalid(format!("layer {l}: incompatible fan-in")));
            }
        }
        if self.output_head == OutputHead::Linear && self.n_outputs() != 1 {
            return Err(invalid("a linear head has exactly one output"));
        }
        Ok(())
    }

    /// Pre-activations of every layer; the last entry holds the raw outputs.
    fn forward_pass(&self, x: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        let mut pre = Vec::with_capacity(self.layer_weights.len());
        let last = self.layer_weights.len() - 1;
        let mut act = x.to_owned();
        for (l, (w, b)) in self.layer_weights.iter().zip(&self.layer_biases).enumerate() {
            let z = act.dot(w) + b;
            if l < last {
                act = z.mapv(relu);
            }
            pre.push(z);
        }
        pre
    }

    /// Pre-activations of every layer for `features`; the last entry holds
    /// the raw (pre-softmax) outputs.
    pub fn pre_activations(&self, features: ArrayView2<'_, f64>) -> Vec<Array2<f64>> {
        self.forward_pass(features)
    }

    /// Regression outputs (`n x 1`) or class probabilities (`n x k`).
    pub fn forward(&self, features: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.n_inputs() {
            return Err(invalid(format!(
                "expected {} features, got {}",
                self.n_inputs(),
                features.ncols()
            )));
        }
        let mut out = self.forward_pass(features).pop().expect("at least one layer");
        if self.output_head == OutputHead::Softmax {
            softmax_rows(&mut out);
        }
        Ok(out)
    }

    /// Point predictions: regression values or argmax class indices.
    pub fn predict(&self, features: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let out = self.forward(features)?;
        Ok(match self.output_head {
            OutputHead::Linear => out.column(0).to_owned(),
            OutputHead::Softmax => out
                .rows()
                .into_iter()
                .map(|r| argmax(r.as_slice().expect("standard layout")) as f64)
                .collect(),
        })
    }

    pub fn loss(&self, env: &TabularDataset) -> Result<f64> {
        self.check_env(env)?;
        let out = self.forward(env.features())?;
        Ok(loss_from_outputs(self.output_head, &out, env))
    }

    fn check_env(&self, env: &TabularDataset) -> Result<()> {
        if env.n_features() != self.n_inputs() {
            return Err(invalid(format!(
                "environment has {} features, model expects {}",
                env.n_features(),
                self.n_inputs()
            )));
        }
        match (self.output_head, env.task()) {
            (OutputHead::Linear, Task::Regression) => Ok(()),
            (OutputHead::Softmax, Task::Classification { n_classes }) if n_classes == self.n_outputs() => Ok(()),
            _ => Err(invalid("model head does not match the dataset task")),
        }
    }

    /// Writes the flat JSON form: layer sizes plus row-major weight arrays.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&MlpDocument::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: MlpDocument = serde_json::from_str(s)?;
        doc.try_into()
    }
}

fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
}

fn loss_from_outputs(head: OutputHead, out: &Array2<f64>, env: &TabularDataset) -> f64 {
    let n = env.n_rows() as f64;
    match head {
        OutputHead::Linear => {
            let r = &out.column(0) - &env.target();
            r.dot(&r) / n
        }
        OutputHead::Softmax => {
            let mut total = 0.0;
            for (row, &y) in out.rows().into_iter().zip(env.target()) {
                total -= row[y as usize].max(f64::MIN_POSITIVE).ln();
            }
            total / n
        }
    }
}

/// Full-batch gradient of the mean loss on one environment.
pub fn env_backward(model: &MlpModel, env: &TabularDataset) -> Result<MlpGradients> {
    model.check_env(env)?;
    if env.is_empty() {
        return Err(invalid("environment is empty"));
    }
    Ok(backward_unchecked(model, env))
}

fn backward_unchecked(model: &MlpModel, env: &TabularDataset) -> MlpGradients {
    let x = env.features();
    let n = env.n_rows() as f64;
    let pre = model.forward_pass(x);
    let n_layers = model.layer_weights.len();

    let mut delta = pre[n_layers - 1].clone();
    match model.output_head {
        OutputHead::Linear => {
            Zip::from(delta.column_mut(0))
                .and(env.target())
                .for_each(|d, &y| *d = 2.0 * (*d - y) / n);
        }
        OutputHead::Softmax => {
            softmax_rows(&mut delta);
            for (mut row, &y) in delta.rows_mut().into_iter().zip(env.target()) {
                row[y as usize] -= 1.0;
                row.mapv_inplace(|v| v / n);
            }
        }
    }

    let mut grads = MlpGradients::zeros_like(model);
    for l in (0..n_layers).rev() {
        grads.biases[l] = delta.sum_axis(Axis(0));
        if l == 0 {
            grads.weights[0] = x.t().dot(&delta);
        } else {
            let act = pre[l - 1].mapv(relu);
            grads.weights[l] = act.t().dot(&delta);
            let mut back = delta.dot(&model.layer_weights[l].t());
            Zip::from(&mut back)
                .and(&pre[l - 1])
                .for_each(|b, &z| {
                    if z <= 0.0 {
                        *b = 0.0
                    }
                });
            delta = back;
        }
    }
    grads
}

/// Entry `(i, j)`: L2 norm of the first-layer gradient row of feature `j`
/// in environment `i`.
pub fn feature_gradient_norms(per_env: &[MlpGradients]) -> Result<Array2<f64>> {
    let first = per_env
        .first()
        .ok_or_else(|| invalid("no environment gradients"))?;
    let shape = first.weights[0].raw_dim();
    let d = shape[0];
    let mut out = Array2::zeros((per_env.len(), d));
    for (i, g) in per_env.iter().enumerate() {
        if g.weights[0].raw_dim() != shape {
            return Err(invalid(format!("environment {i} has a different first-layer shape")));
        }
        for (j, row) in g.weights[0].rows().into_iter().enumerate() {
            out[[i, j]] = row.dot(&row).sqrt();
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpTrainConfig {
    pub hidden_sizes: Vec<usize>,
    pub learning_rate: f64,
    pub steps: usize,
    pub thresholds: Vec<f64>,
    pub trace_every: Option<usize>,
    pub seed: u64,
}

impl Default for MlpTrainConfig {
    fn default() -> Self {
        Self {
            hidden_sizes: vec![64, 32],
            learning_rate: 1e-2,
            steps: 2000,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            trace_every: None,
            seed: 0,
        }
    }
}

impl MlpTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.hidden_sizes.iter().any(|&h| h == 0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
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

/// Builds the initial network for the task of `envs`.
pub fn init_for(envs: &EnvironmentSet, cfg: &MlpTrainConfig) -> Result<MlpModel> {
    let (head, k) = match envs.task() {
        Task::Regression => (OutputHead::Linear, 1),
        Task::Classification { n_classes } => (OutputHead::Softmax, n_classes),
    };
    MlpModel::init(envs.n_features(), &cfg.hidden_sizes, head, k, cfg.seed)
}

fn per_env_gradients(model: &MlpModel, envs: &EnvironmentSet) -> Vec<MlpGradients> {
    // collect keeps environment order, so the later reduction is deterministic
    envs.environments()
        .par_iter()
        .map(|env| backward_unchecked(model, env))
        .collect()
}

fn descend(
    envs: &EnvironmentSet,
    cfg: &MlpTrainConfig,
    threshold: Option<f64>,
) -> Result<(MlpModel, TrainTrace)> {
    cfg.validate()?;
    let mut model = init_for(envs, cfg)?;
    for (i, env) in envs.iter().enumerate() {
        model.check_env(env)?;
        if env.is_empty() {
            return Err(invalid(format!("environment {i} is empty")));
        }
    }
    let d = envs.n_features();
    let lr = cfg.learning_rate;
    let mut trace = TrainTrace {
        masks: Vec::new(),
        update_counts: vec![0; d],
        final_env_losses: Vec::new(),
    };

    for step in 0..cfg.steps {
        let per_env = per_env_gradients(&model, envs);
        if per_env.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                step,
                reason: "non-finite gradient".into(),
            });
        }
        let mask = match threshold {
            None => None,
            Some(t) => {
                let norms = feature_gradient_norms(&per_env)?;
                let stats = ConsistencyStats::from_env_values(norms.view(), t)?;
                Some(stats.mask)
            }
        };
        if let (Some(k), Some(mask)) = (cfg.trace_every, &mask) {
            if step % k == 0 {
                trace.masks.push((step, mask.clone()));
            }
        }
        let mean = MlpGradients::mean(&per_env);

        for (j, (mut row, grow)) in model.layer_weights[0]
            .rows_mut()
            .into_iter()
            .zip(mean.weights[0].rows())
            .enumerate()
        {
            if mask.as_ref().is_none_or(|mk| mk[j]) {
                row.scaled_add(-lr, &grow);
                trace.update_counts[j] += 1;
            }
        }
        for (w, g) in model.layer_weights.iter_mut().zip(&mean.weights).skip(1) {
            w.scaled_add(-lr, g);
        }
        for (b, g) in model.layer_biases.iter_mut().zip(&mean.biases) {
            b.scaled_add(-lr, g);
        }
        if !model.is_finite() {
            return Err(Error::Divergence {
                step,
                reason: "non-finite parameters".into(),
            });
        }
    }
    trace.final_env_losses = envs.iter().map(|e| model.loss(e)).collect::<Result<_>>()?;
    if trace.final_env_losses.iter().any(|l| !l.is_finite()) {
        return Err(Error::Divergence {
            step: cfg.steps,
            reason: "non-finite loss".into(),
        });
    }
    Ok((model, trace))
}

/// Pooled-mean gradient descent on every parameter.
pub fn train_mlp_erm(envs: &EnvironmentSet, cfg: &MlpTrainConfig) -> Result<MlpModel> {
    descend(envs, cfg, None).map(|(m, _)| m)
}

pub fn train_mlp_cglearn(
    envs: &EnvironmentSet,
    cfg: &MlpTrainConfig,
    threshold: f64,
) -> Result<(MlpModel, TrainTrace)> {
    if envs.len() < 2 {
        return Err(invalid("CGLearn needs at least two environments"));
    }
    if !(threshold >= 0.0) {
        return Err(invalid(format!("threshold must be non-negative, got {threshold}")));
    }
    descend(envs, cfg, Some(threshold))
}

/// Trains one CGLearn network per candidate and keeps the lowest validation
/// loss (MSE or cross-entropy); ties go to the smaller threshold.
pub fn select_mlp_threshold(
    train_envs: &EnvironmentSet,
    validation_env: &TabularDataset,
    cfg: &MlpTrainConfig,
) -> Result<(f64, MlpModel)> {
    let mut candidates = cfg.thresholds.clone();
    if candidates.is_empty() {
        return Err(Error::Config("threshold candidate list is empty".into()));
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best: Option<(f64, MlpModel, f64)> = None;
    for t in candidates {
        let (model, _) = train_mlp_cglearn(train_envs, cfg, t)?;
        let loss = model.loss(validation_env)?;
        if best.as_ref().is_none_or(|b| loss < b.2) {
            best = Some((t, model, loss));
        }
    }
    let (t, model, _) = best.expect("non-empty candidates");
    Ok((t, model))
}

#[derive(Debug, Serialize, Deserialize)]
struct MlpDocument {
    layer_sizes: Vec<usize>,
    hidden_activation: Activation,
    output_head: OutputHead,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl From<&MlpModel> for MlpDocument {
    fn from(m: &MlpModel) -> Self {
        Self {
            layer_sizes: m.layer_sizes(),
            hidden_activation: m.hidden_activation,
            output_head: m.output_head,
            weights: m.layer_weights.iter().map(|w| w.iter().copied().collect()).collect(),
            biases: m.layer_biases.iter().map(|b| b.to_vec()).collect(),
        }
    }
}

impl TryFrom<MlpDocument> for MlpModel {
    type Error = Error;

    fn try_from(doc: MlpDocument) -> Result<Self> {
        let sizes = &doc.layer_sizes;
        if sizes.len() < 2 || doc.weights.len() != sizes.len() - 1 || doc.biases.len() != sizes.len() - 1 {
            return Err(Error::Data("model document has inconsistent layer counts".into()));
        }
        let mut layer_weights = Vec::new();
        let mut layer_biases = Vec::new();
        for (l, pair) in sizes.windows(2).enumerate() {
            let w = Array2::from_shape_vec((pair[0], pair[1]), doc.weights[l].clone())
                .map_err(|e| Error::Data(format!("layer {l} weights: {e}")))?;
            if doc.biases[l].len() != pair[1] {
                return Err(Error::Data(format!("layer {l} bias has wrong length")));
            }
            layer_weights.push(w);
            layer_biases.push(Array1::from(doc.biases[l].clone()));
        }
        let model = MlpModel {
            layer_weights,
            layer_biases,
            hidden_activation: doc.hidden_activation,
            output_head: doc.output_head,
        };
        model.validate()?;
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::default_feature_names;
    use ndarray::array;

    fn tiny_model() -> MlpModel {
        // one hidden unit: h = relu(2*x1 - x2 + 0.5); out = 3*h - 1
        MlpModel {
            layer_weights: vec![array![[2.0], [-1.0]], array![[3.0]]],
            layer_biases: vec![array![0.5], array![-1.0]],
            hidden_activation: Activation::Relu,
            output_head: OutputHead::Linear,
        }
    }

    #[test]
    fn hand_computed_forward() {
        let out = tiny_model().forward(array![[1.0, 1.0], [0.0, 2.0]].view()).unwrap();
        // row 0: relu(1.5) = 1.5 -> 3.5 ; row 1: relu(-1.5) = 0 -> -1
        assert_eq!(out, array![[3.5], [-1.0]]);
    }

    #[test]
    fn zero_weights_give_zero_predictions() {
        let mut m = MlpModel::init(3, &[4, 2], OutputHead::Linear, 1, 0).unwrap();
        m.layer_weights.iter_mut().for_each(|w| w.fill(0.0));
        m.layer_biases.iter_mut().for_each(|b| b.fill(0.0));
        let out = m.forward(Array2::from_elem((5, 3), 1.3).view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = MlpModel::init(3, &[5], OutputHead::Softmax, 4, 9).unwrap();
        let x = Array2::from_shape_fn((7, 3), |(i, j)| (i as f64 - 3.0) * (j as f64 + 0.5));
        let out = m.forward(x.view()).unwrap();
        for row in out.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        assert!(tiny_model().forward(array![[1.0, 2.0, 3.0]].view()).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_gradient() {
        let m = tiny_model();
        let x = array![[1.0, 1.0], [2.0, 0.0]];
        let y = m.forward(x.view()).unwrap().column(0).to_owned();
        let env = TabularDataset::regression(x, y).unwrap();
        let g = env_backward(&m, &env).unwrap();
        assert!(g.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(g.biases.iter().all(|b| b.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn duplicated_rows_leave_gradient_unchanged() {
        let m = MlpModel::init(2, &[3], OutputHead::Linear, 1, 4).unwrap();
        let x = array![[0.3, -1.0], [1.2, 0.4]];
        let env = TabularDataset::regression(x.clone(), array![0.5, -0.2]).unwrap();
        let doubled = env.select_rows(&[0, 1, 0, 1]);
        let a = env_backward(&m, &env).unwrap();
        let b = env_backward(&m, &doubled).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            for (u, v) in wa.iter().zip(wb) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn norm_of_three_four_row() {
        let g = MlpGradients {
            weights: vec![array![[3.0, 4.0], [0.0, 0.0]]],
            biases: vec![array![0.0, 0.0]],
        };
        let norms = feature_gradient_norms(&[g]).unwrap();
        assert_eq!(norms, array![[5.0, 0.0]]);
    }

    #[test]
    fn norms_ignore_hidden_unit_order() {
        let g = MlpGradients {
            weights: vec![array![[1.0, -2.0, 0.5], [0.0, 3.0, 1.0]]],
            biases: vec![array![0.0, 0.0, 0.0]],
        };
        let mut p = g.clone();
        p.weights[0] = g.weights[0].select(Axis(1), &[2, 0, 1]);
        assert_eq!(
            feature_gradient_norms(&[g]).unwrap(),
            feature_gradient_norms(&[p]).unwrap()
        );
    }

    #[test]
    fn json_roundtrip() {
        let m = MlpModel::init(3, &[4, 2], OutputHead::Softmax, 3, 11).unwrap();
        let back = MlpModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(m, back);
        assert!(MlpModel::from_json(r#"{"layer_sizes":[2,1],"hidden_activation":"relu","output_head":"linear","weights":[[1.0]],"biases":[[0.0]]}"#).is_err());
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let x = Array2::from_shape_fn((10, 2), |(i, j)| (i * (j + 1)) as f64 / 10.0);
        let y = x.column(0).to_owned();
        let env = TabularDataset::regression(x, y).unwrap();
        let envs = EnvironmentSet::new(vec![env]).unwrap();
        let cfg = MlpTrainConfig {
            hidden_sizes: vec![4],
            steps: 0,
            ..Default::default()
        };
        let m = train_mlp_erm(&envs, &cfg).unwrap();
        assert_eq!(m, init_for(&envs, &cfg).unwrap());
    }

    #[test]
    fn head_task_mismatch() {
        let env = TabularDataset::new(
            array![[1.0], [2.0]],
            array![0.0, 1.0],
            default_feature_names(1),
            Task::Classification { n_classes: 2 },
        )
        .unwrap();
        let m = MlpModel::init(1, &[2], OutputHead::Linear, 1, 0).unwrap();
        assert!(env_backward(&m, &env).is_err());
    }

    fn regression_env(seed: u64, n: usize, f: impl Fn(f64, f64) -> f64) -> TabularDataset {
        let mut rng = seeded(seed);
        let x = Array2::from_shape_fn((n, 2), |_| crate::rng::normal(&mut rng));
        let y = x.rows().into_iter().map(|r| f(r[0], r[1])).collect();
        TabularDataset::regression(x, y).unwrap()
    }

    fn small_cfg(steps: usize) -> MlpTrainConfig {
        MlpTrainConfig {
            hidden_sizes: vec![8, 4],
            learning_rate: 0.05,
            steps,
            ..MlpTrainConfig::default()
        }
    }

    #[test]
    fn erm_fits_identity() {
        let envs = EnvironmentSet::new(vec![regression_env(1, 100, |a, _| a)]).unwrap();
        let cfg = MlpTrainConfig {
            steps: 3000,
            ..small_cfg(0)
        };
        let m = train_mlp_erm(&envs, &cfg).unwrap();
        assert!(m.loss(envs.get(0).unwrap()).unwrap() < 1e-2);
    }

    #[test]
    fn deterministic_for_equal_seeds() {
        let envs = EnvironmentSet::new(vec![
            regression_env(2, 40, |a, b| a - b),
            regression_env(3, 40, |a, b| a + 0.5 * b),
        ])
        .unwrap();
        let a = train_mlp_cglearn(&envs, &small_cfg(50), 1.0).unwrap();
        let b = train_mlp_cglearn(&envs, &small_cfg(50), 1.0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn threshold_zero_is_erm() {
        let envs = EnvironmentSet::new(vec![
            regression_env(4, 30, |a, b| a * b),
            regression_env(5, 30, |a, _| 2.0 * a),
        ])
        .unwrap();
        let (cg, trace) = train_mlp_cglearn(&envs, &small_cfg(100), 0.0).unwrap();
        assert_eq!(cg, train_mlp_erm(&envs, &small_cfg(100)).unwrap());
        assert_eq!(trace.update_counts, vec![100, 100]);
    }

    #[test]
    fn masked_rows_keep_initial_bits() {
        let envs = EnvironmentSet::new(vec![
            regression_env(6, 30, |a, b| a + b),
            regression_env(7, 30, |a, b| a - 3.0 * b),
        ])
        .unwrap();
        let cfg = small_cfg(200);
        let init = init_for(&envs, &cfg).unwrap();
        let (m, trace) = train_mlp_cglearn(&envs, &cfg, 1e300).unwrap();
        assert_eq!(trace.update_counts, vec![0, 0]);
        assert_eq!(m.layer_weights[0], init.layer_weights[0]);
        assert_ne!(m.layer_weights[1], init.layer_weights[1]);
    }

    #[test]
    fn consistency_stats_match_columnwise_helpers() {
        let envs = EnvironmentSet::new(vec![
            regression_env(8, 20, |a, b| a + b),
            regression_env(9, 20, |a, b| a - b),
            regression_env(10, 20, |a, _| a),
        ])
        .unwrap();
        let m = init_for(&envs, &small_cfg(1)).unwrap();
        let per_env: Vec<_> = envs.iter().map(|e| env_backward(&m, e).unwrap()).collect();
        let norms = feature_gradient_norms(&per_env).unwrap();
        let stats = ConsistencyStats::from_env_values(norms.view(), 1.0).unwrap();
        for j in 0..2 {
            let col = norms.column(j).to_vec();
            let sample = crate::consistency::GradientSample::new(&col).unwrap();
            assert_eq!(stats.mu[j], crate::consistency::mean_gradient(sample));
            assert_eq!(stats.sigma[j], crate::consistency::std_gradient(sample));
        }
    }

    #[test]
    fn classification_loss_mostly_decreases() {
        let mut rng = seeded(11);
        let x = Array2::from_shape_fn((120, 2), |_| crate::rng::normal(&mut rng));
        let y: Array1<f64> = x
            .rows()
            .into_iter()
            .map(|r| if r[0] + r[1] > 0.5 { 2.0 } else if r[0] > 0.0 { 1.0 } else { 0.0 })
            .collect();
        let env = TabularDataset::new(x, y, default_feature_names(2), Task::Classification { n_classes: 3 })
            .unwrap();
        let envs = EnvironmentSet::new(vec![env]).unwrap();
        let mut cfg = MlpTrainConfig::default();
        let mut losses = Vec::new();
        for steps in (0..=1000).step_by(100) {
            cfg.steps = steps;
            losses.push(train_mlp_erm(&envs, &cfg).unwrap().loss(envs.get(0).unwrap()).unwrap());
        }
        let down = losses.windows(2).filter(|w| w[1] <= w[0]).count();
        assert!(down * 10 >= (losses.len() - 1) * 9, "{losses:?}");
    }

    #[test]
    fn demo_spurious_row_stays_frozen() {
        let envs = crate::synthgen::generate_two_feature_demo(&[0.2, 2.0, 5.0], 500, 3).unwrap();
        let cfg = MlpTrainConfig {
            steps: 500,
            ..MlpTrainConfig::default()
        };
        let init = init_for(&envs, &cfg).unwrap();
        let (m, trace) = train_mlp_cglearn(&envs, &cfg, 4.0).unwrap();
        assert_eq!(trace.update_counts[1], 0);
        assert_eq!(m.layer_weights[0].row(1), init.layer_weights[0].row(1));
        assert!(trace.update_counts[0] > 0);
        assert_ne!(m.layer_weights[0].row(0), init.layer_weights[0].row(0));
    }
}
