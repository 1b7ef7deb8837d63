//! Python bindings. Matrices cross the boundary as lists of rows.

use ndarray::{Array1, Array2};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cglearn_core::consistency::ConsistencyStats;
use cglearn_core::dataset::{default_feature_names, EnvironmentSet, TabularDataset, Task};
use cglearn_core::envcluster;
use cglearn_core::eval;
use cglearn_core::experiment::{self, ExperimentConfig};
use cglearn_core::lingrad::{self, StepSize, TrainConfig};
use cglearn_core::mlp::{self, MlpTrainConfig};
use cglearn_core::synthgen::{self, SemCase, SemConfig};

create_exception!(cglearn, CgLearnError, PyException);

fn py_err(e: cglearn_core::Error) -> PyErr {
    CgLearnError::new_err(e.to_string())
}

fn to_array2(rows: &[Vec<f64>]) -> PyResult<Array2<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != d) {
        return Err(CgLearnError::new_err("rows have different lengths"));
    }
    Array2::from_shape_vec((rows.len(), d), rows.concat())
        .map_err(|e| CgLearnError::new_err(e.to_string()))
}

fn to_rows(a: ndarray::ArrayView2<'_, f64>) -> Vec<Vec<f64>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn make_dataset(features: &[Vec<f64>], target: Vec<f64>, n_classes: Option<usize>) -> PyResult<TabularDataset> {
    let x = to_array2(features)?;
    let task = match n_classes {
        Some(k) => Task::Classification { n_classes: k },
        None => Task::Regression,
    };
    let d = x.ncols();
    TabularDataset::new(x, Array1::from(target), default_feature_names(d), task).map_err(py_err)
}

fn linear_config(steps: usize, lr: Option<f64>) -> TrainConfig {
    TrainConfig {
        step_size: lr.map_or(StepSize::InverseCurvature(1.0), StepSize::Fixed),
        steps,
        ..TrainConfig::default()
    }
}

/// A list of environments sharing one schema.
#[pyclass(name = "Environments", module = "cglearn", skip_from_py_object)]
#[derive(Clone)]
struct PyEnvironments {
    inner: EnvironmentSet,
}

#[pymethods]
impl PyEnvironments {
    /// `envs` is a list of `(features, target)` pairs.
    #[new]
    #[pyo3(signature = (envs, n_classes=None))]
    fn new(envs: Vec<(Vec<Vec<f64>>, Vec<f64>)>, n_classes: Option<usize>) -> PyResult<Self> {
        let sets = envs
            .into_iter()
            .map(|(x, y)| make_dataset(&x, y, n_classes))
            .collect::<PyResult<Vec<_>>>()?;
        Ok(Self {
            inner: EnvironmentSet::new(sets).map_err(py_err)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn sizes(&self) -> Vec<usize> {
        self.inner.iter().map(TabularDataset::n_rows).collect()
    }

    /// `(features, target)` of environment `i`.
    fn environment(&self, i: usize) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
        let env = self
            .inner
            .get(i)
            .ok_or_else(|| CgLearnError::new_err(format!("no environment {i}")))?;
        Ok((to_rows(env.features()), env.target().to_vec()))
    }

    /// Keeps the listed environments, in the given order.
    fn subset(&self, indices: Vec<usize>) -> PyResult<Self> {
        Ok(Self {
            inner: self.inner.subset(&indices).map_err(py_err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Environments(sizes={:?}, n_features={})", self.sizes(), self.n_features())
    }
}

#[pyclass(name = "LinearModel", module = "cglearn", skip_from_py_object)]
#[derive(Clone)]
struct PyLinearModel {
    inner: lingrad::LinearModel,
}

#[pymethods]
impl PyLinearModel {
    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.to_vec()
    }

    #[getter]
    fn bias(&self) -> f64 {
        self.inner.bias
    }

    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = to_array2(&features)?;
        if x.ncols() != self.inner.weights.len() {
            return Err(CgLearnError::new_err("feature count does not match the model"));
        }
        Ok(self.inner.predict(x.view()).to_vec())
    }

    fn mse(&self, features: Vec<Vec<f64>>, target: Vec<f64>) -> PyResult<f64> {
        let env = make_dataset(&features, target, None)?;
        if env.n_features() != self.inner.weights.len() {
            return Err(CgLearnError::new_err("feature count does not match the model"));
        }
        Ok(self.inner.mse(&env))
    }

    fn __repr__(&self) -> String {
        format!("LinearModel(weights={:?}, bias={})", self.inner.weights.to_vec(), self.inner.bias)
    }
}

#[pyclass(name = "MlpModel", module = "cglearn", skip_from_py_object)]
#[derive(Clone)]
struct PyMlpModel {
    inner: mlp::MlpModel,
}

#[pymethods]
impl PyMlpModel {
    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes()
    }

    /// First-layer weight row of feature `j`.
    fn input_row(&self, j: usize) -> PyResult<Vec<f64>> {
        let w = &self.inner.layer_weights[0];
        if j >= w.nrows() {
            return Err(CgLearnError::new_err(format!("no feature {j}")));
        }
        Ok(w.row(j).to_vec())
    }

    /// Regression output, or the predicted class index as a float.
    fn predict(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let x = to_array2(&features)?;
        Ok(self.inner.predict(x.view()).map_err(py_err)?.to_vec())
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: mlp::MlpModel::from_json(text).map_err(py_err)?,
        })
    }
}

/// Per-feature mean, std, ratio and mask of an environments-by-features
/// gradient matrix.
#[pyfunction]
fn consistency_stats<'py>(py: Python<'py>, values: Vec<Vec<f64>>, threshold: f64) -> PyResult<Bound<'py, PyDict>> {
    let a = to_array2(&values)?;
    let s = ConsistencyStats::from_env_values(a.view(), threshold).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("mu", s.mu)?;
    out.set_item("sigma", s.sigma)?;
    out.set_item("ratio", s.ratio)?;
    out.set_item("mask", s.mask)?;
    Ok(out)
}

/// Linear SEM environments for a case code such as `"FEU"`. Returns the
/// environments and the generating coefficients.
#[pyfunction]
#[pyo3(signature = (case, seed=0, n_samples=1000, env_values=None))]
fn generate_environments<'py>(
    py: Python<'py>,
    case: &str,
    seed: u64,
    n_samples: usize,
    env_values: Option<Vec<f64>>,
) -> PyResult<(PyEnvironments, Bound<'py, PyDict>)> {
    let mut cfg = SemConfig::for_case(SemCase::parse(case).map_err(py_err)?);
    cfg.seed = seed;
    cfg.n_samples = n_samples;
    if let Some(e) = env_values {
        cfg.env_values = e;
    }
    let (envs, truth) = synthgen::generate_environments(&cfg).map_err(py_err)?;
    let gt = PyDict::new(py);
    gt.set_item("w_causal", truth.w_causal.to_vec())?;
    gt.set_item("w_effect", truth.w_effect.to_vec())?;
    gt.set_item("scramble", to_rows(truth.scramble.view()))?;
    Ok((PyEnvironments { inner: envs }, gt))
}

#[pyfunction]
#[pyo3(signature = (e_values=vec![0.2, 2.0, 5.0], n=1000, seed=0))]
fn generate_two_feature_demo(e_values: Vec<f64>, n: usize, seed: u64) -> PyResult<PyEnvironments> {
    Ok(PyEnvironments {
        inner: synthgen::generate_two_feature_demo(&e_values, n, seed).map_err(py_err)?,
    })
}

#[pyfunction]
fn split_into_batches(features: Vec<Vec<f64>>, target: Vec<f64>, b: usize, seed: u64) -> PyResult<PyEnvironments> {
    let ds = make_dataset(&features, target, None)?;
    Ok(PyEnvironments {
        inner: synthgen::split_into_batches(&ds, b, seed).map_err(py_err)?,
    })
}

/// `lr=None` uses the inverse-curvature step size.
#[pyfunction]
#[pyo3(signature = (envs, steps=5000, lr=None))]
fn train_erm(envs: &PyEnvironments, steps: usize, lr: Option<f64>) -> PyResult<PyLinearModel> {
    let inner = lingrad::train_erm(&envs.inner, &linear_config(steps, lr)).map_err(py_err)?;
    Ok(PyLinearModel { inner })
}

/// Returns the model and how many steps each weight was updated.
#[pyfunction]
#[pyo3(signature = (envs, threshold, steps=5000, lr=None))]
fn train_cglearn(
    envs: &PyEnvironments,
    threshold: f64,
    steps: usize,
    lr: Option<f64>,
) -> PyResult<(PyLinearModel, Vec<usize>)> {
    let (inner, trace) =
        lingrad::train_cglearn(&envs.inner, &linear_config(steps, lr), threshold).map_err(py_err)?;
    Ok((PyLinearModel { inner }, trace.update_counts))
}

/// Picks the threshold with the lowest MSE on environment `validation`,
/// training on the others.
#[pyfunction]
#[pyo3(signature = (envs, validation, thresholds=None, steps=5000, lr=None))]
fn select_threshold(
    envs: &PyEnvironments,
    validation: usize,
    thresholds: Option<Vec<f64>>,
    steps: usize,
    lr: Option<f64>,
) -> PyResult<(f64, PyLinearModel)> {
    let val = envs
        .inner
        .get(validation)
        .ok_or_else(|| CgLearnError::new_err(format!("no environment {validation}")))?;
    let rest: Vec<usize> = (0..envs.inner.len()).filter(|&i| i != validation).collect();
    let train = envs.inner.subset(&rest).map_err(py_err)?;
    let mut cfg = linear_config(steps, lr);
    if let Some(t) = thresholds {
        cfg.thresholds = t;
    }
    let (t, inner, _) = lingrad::select_threshold(&train, val, &cfg).map_err(py_err)?;
    Ok((t, PyLinearModel { inner }))
}

#[pyfunction]
#[pyo3(signature = (envs, penalty_weight, steps=5000, lr=None))]
fn train_irmv1(envs: &PyEnvironments, penalty_weight: f64, steps: usize, lr: Option<f64>) -> PyResult<PyLinearModel> {
    let inner = lingrad::train_irmv1(&envs.inner, &linear_config(steps, lr), penalty_weight).map_err(py_err)?;
    Ok(PyLinearModel { inner })
}

/// ERM when `threshold` is `None`, CGLearn otherwise.
#[pyfunction]
#[pyo3(signature = (envs, threshold=None, hidden_sizes=vec![64, 32], steps=2000, learning_rate=1e-2, seed=0))]
fn train_mlp(
    envs: &PyEnvironments,
    threshold: Option<f64>,
    hidden_sizes: Vec<usize>,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> PyResult<PyMlpModel> {
    let cfg = MlpTrainConfig {
        hidden_sizes,
        steps,
        learning_rate,
        seed,
        ..MlpTrainConfig::default()
    };
    let inner = match threshold {
        None => mlp::train_mlp_erm(&envs.inner, &cfg),
        Some(t) => mlp::train_mlp_cglearn(&envs.inner, &cfg, t).map(|(m, _)| m),
    }
    .map_err(py_err)?;
    Ok(PyMlpModel { inner })
}

/// Clusters rows into environments, choosing k by silhouette. Returns the
/// environments, the chosen k and its silhouette.
#[pyfunction]
#[pyo3(signature = (features, target, k_min=2, k_max=10, seed=0))]
fn build_environments(
    features: Vec<Vec<f64>>,
    target: Vec<f64>,
    k_min: usize,
    k_max: usize,
    seed: u64,
) -> PyResult<(PyEnvironments, usize, f64)> {
    let ds = make_dataset(&features, target, None)?;
    let (envs, assign) = envcluster::build_environments(&ds, k_min..=k_max, seed).map_err(py_err)?;
    Ok((PyEnvironments { inner: envs }, assign.k, assign.silhouette))
}

#[pyfunction]
fn welch_ttest<'py>(py: Python<'py>, a: Vec<f64>, b: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let r = eval::welch_ttest(&a, &b).map_err(py_err)?;
    let out = PyDict::new(py);
    out.set_item("t", r.t)?;
    out.set_item("df", r.df)?;
    out.set_item("p_value", r.p_value)?;
    out.set_item("significant", r.significant)?;
    Ok(out)
}

/// Runs a scenario from a TOML config and returns `(summary_csv, trials_jsonl)`.
#[pyfunction]
fn run_experiment(py: Python<'_>, config_toml: &str) -> PyResult<(String, String)> {
    let cfg = ExperimentConfig::from_toml_str(config_toml).map_err(py_err)?;
    let out = py.detach(|| experiment::run(&cfg)).map_err(py_err)?;
    Ok((out.summary_csv().map_err(py_err)?, out.trials_jsonl().map_err(py_err)?))
}

#[pymodule]
fn cglearn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("CgLearnError", m.py().get_type::<CgLearnError>())?;
    m.add("DEFAULT_THRESHOLDS", lingrad::DEFAULT_THRESHOLDS.to_vec())?;
    m.add_class::<PyEnvironments>()?;
    m.add_class::<PyLinearModel>()?;
    m.add_class::<PyMlpModel>()?;
    m.add_function(wrap_pyfunction!(consistency_stats, m)?)?;
    m.add_function(wrap_pyfunction!(generate_environments, m)?)?;
    m.add_function(wrap_pyfunction!(generate_two_feature_demo, m)?)?;
    m.add_function(wrap_pyfunction!(split_into_batches, m)?)?;
    m.add_function(wrap_pyfunction!(train_erm, m)?)?;
    m.add_function(wrap_pyfunction!(train_cglearn, m)?)?;
    m.add_function(wrap_pyfunction!(select_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(train_irmv1, m)?)?;
    m.add_function(wrap_pyfunction!(train_mlp, m)?)?;
    m.add_function(wrap_pyfunction!(build_environments, m)?)?;
    m.add_function(wrap_pyfunction!(welch_ttest, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
