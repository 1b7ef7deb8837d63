//! Metrics, Welch's t-test, coefficient errors against synthetic ground
//! truth, and the leave-one-environment-out protocol.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use ndarray::ArrayView1;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::data_io::Standardizer;
use crate::dataset::{EnvironmentSet, TabularDataset, Task};
use crate::error::{invalid, Error, Result};
use crate::lingrad::LinearModel;
use crate::mlp::{select_mlp_threshold, train_mlp_erm, MlpModel, MlpTrainConfig};
use crate::rng::derive_seed;
use crate::synthgen::GroundTruth;

pub const ALPHA: f64 = 0.05;

pub mod metric {
    pub const CAUSAL_ERROR: &str = "causal_error";
    pub const NONCAUSAL_ERROR: &str = "noncausal_error";
    pub const RMSE_TRAIN: &str = "rmse_train";
    pub const RMSE_TEST: &str = "rmse_test";
    pub const ACCURACY_TRAIN: &str = "accuracy_train";
    pub const ACCURACY_TEST: &str = "accuracy_test";
    pub const F1_TRAIN: &str = "f1_train";
    pub const F1_TEST: &str = "f1_test";
    pub const F1_MACRO_TRAIN: &str = "f1_macro_train";
    pub const F1_MACRO_TEST: &str = "f1_macro_test";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "CGLearn")]
    CgLearn,
    #[serde(rename = "IRMv1")]
    IrmV1,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Erm, Method::CgLearn, Method::IrmV1];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "ERM",
            Method::CgLearn => "CGLearn",
            Method::IrmV1 => "IRMv1",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "erm" => Ok(Method::Erm),
            "cglearn" | "cg" => Ok(Method::CgLearn),
            "irm" | "irmv1" => Ok(Method::IrmV1),
            other => Err(Error::Config(format!("unknown method {other:?}"))),
        }
    }
}

/// Mean squared coefficient errors in the generative basis: causal weights
/// against their true values, effect weights against zero.
pub fn coefficient_errors(model: &LinearModel, truth: &GroundTruth) -> Result<(f64, f64)> {
    let d = truth.scramble.nrows();
    if model.weights.len() != d {
        return Err(invalid(format!(
            "model has {} weights, ground truth has {d}",
            model.weights.len()
        )));
    }
    let w = truth.to_generative(&model.weights);
    let dc = truth.d_causal();
    let causal = w
        .iter()
        .zip(&truth.w_causal)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / dc as f64;
    let de = d - dc;
    let noncausal = if de == 0 {
        0.0
    } else {
        w.iter().skip(dc).map(|a| a * a).sum::<f64>() / de as f64
    };
    Ok((causal, noncausal))
}

pub fn rmse(predictions: ArrayView1<'_, f64>, targets: ArrayView1<'_, f64>) -> Result<f64> {
    if predictions.len() != targets.len() {
        return Err(invalid("prediction and target lengths differ"));
    }
    if targets.is_empty() {
        return Err(invalid("cannot score an empty set"));
    }
    let sse: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t).powi(2))
        .sum();
    Ok((sse / targets.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    /// Percentage of exact matches, in `[0, 100]`.
    pub accuracy: f64,
    /// Per-class F1 averaged with class-support weights.
    pub f1_weighted: f64,
    /// Unweighted mean of per-class F1 over classes seen in either vector.
    pub f1_macro: f64,
}

pub fn classification_metrics(predictions: &[usize], targets: &[usize]) -> Result<ClassificationMetrics> {
    if predictions.len() != targets.len() {
        return Err(invalid("prediction and target lengths differ"));
    }
    if targets.is_empty() {
        return Err(invalid("cannot score an empty set"));
    }
    let n = targets.len() as f64;
    let classes: BTreeSet<usize> = predictions.iter().chain(targets).copied().collect();
    let correct = predictions.iter().zip(targets).filter(|(p, t)| p == t).count();
    let mut weighted = 0.0;
    let mut macro_sum = 0.0;
    for &c in &classes {
        let tp = predictions
            .iter()
            .zip(targets)
            .filter(|(p, t)| **p == c && **t == c)
            .count() as f64;
        let predicted = predictions.iter().filter(|p| **p == c).count() as f64;
        let support = targets.iter().filter(|t| **t == c).count() as f64;
        let denom = predicted + support;
        let f1 = if denom > 0.0 { 2.0 * tp / denom } else { 0.0 };
        weighted += f1 * support / n;
        macro_sum += f1;
    }
    Ok(ClassificationMetrics {
        accuracy: 100.0 * correct as f64 / n,
        f1_weighted: weighted,
        f1_macro: macro_sum / classes.len() as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
    pub significant: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch's unequal-variance t-test.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<SignificanceResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(invalid("each sample needs at least two values"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(invalid("samples must be finite"));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / na, vb / nb);
    let se2 = sa + sb;
    if se2 == 0.0 {
        // Both samples are constant: identical means are indistinguishable,
        // different ones are separated with certainty.
        let (t, p) = if ma == mb {
            (0.0, 1.0)
        } else {
            ((ma - mb).signum() * f64::INFINITY, 0.0)
        };
        return Ok(SignificanceResult {
            t,
            df: na + nb - 2.0,
            p_value: p,
            significant: p < ALPHA,
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| invalid(e.to_string()))?;
    let p = (2.0 * dist.sf(t.abs())).clamp(0.0, 1.0);
    Ok(SignificanceResult {
        t,
        df,
        p_value: p,
        significant: p < ALPHA,
    })
}

/// Mean and population standard deviation (divisor `n`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: f64::NAN,
                std: f64::NAN,
                n,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            n,
        }
    }
}

/// Metrics of one trial on one fold (synthetic runs use a single fold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldRecord {
    pub trial: usize,
    pub fold: usize,
    pub test_env: Option<usize>,
    pub validation_env: Option<usize>,
    pub threshold: Option<f64>,
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: Method,
    pub folds: Vec<FoldRecord>,
    /// Metric name to one value per trial (the mean over that trial's folds),
    /// in ascending trial order.
    pub per_trial: BTreeMap<String, Vec<f64>>,
    pub aggregates: BTreeMap<String, Aggregate>,
}

impl EvalReport {
    pub fn from_folds(method: Method, folds: Vec<FoldRecord>) -> Self {
        let trials: BTreeSet<usize> = folds.iter().map(|f| f.trial).collect();
        let names: BTreeSet<&String> = folds.iter().flat_map(|f| f.metrics.keys()).collect();
        let mut per_trial = BTreeMap::new();
        for name in names {
            let values: Vec<f64> = trials
                .iter()
                .filter_map(|&t| {
                    let vals: Vec<f64> = folds
                        .iter()
                        .filter(|f| f.trial == t)
                        .filter_map(|f| f.metrics.get(name).copied())
                        .collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            per_trial.insert(name.clone(), values);
        }
        let aggregates = per_trial
            .iter()
            .map(|(k, v)| (k.clone(), Aggregate::of(v)))
            .collect();
        Self {
            method,
            folds,
            per_trial,
            aggregates,
        }
    }

    pub fn trial_values(&self, metric: &str) -> Option<&[f64]> {
        self.per_trial.get(metric).map(Vec::as_slice)
    }

    pub fn aggregate(&self, metric: &str) -> Option<Aggregate> {
        self.aggregates.get(metric).copied()
    }

    /// Welch test of this report's per-trial values against `other`'s.
    pub fn compare(&self, other: &EvalReport, metric: &str) -> Result<SignificanceResult> {
        let a = self
            .trial_values(metric)
            .ok_or_else(|| invalid(format!("{} has no metric {metric}", self.method)))?;
        let b = other
            .trial_values(metric)
            .ok_or_else(|| invalid(format!("{} has no metric {metric}", other.method)))?;
        welch_ttest(a, b)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// One row per trial-fold; metric columns in name order, blank when absent.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let names: Vec<&String> = self.per_trial.keys().collect();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["method", "trial", "fold", "test_env", "validation_env", "threshold"];
        header.extend(names.iter().map(|s| s.as_str()));
        w.write_record(&header)?;
        let opt = |v: Option<String>| v.unwrap_or_default();
        for f in &self.folds {
            let mut row = vec![
                self.method.name().to_string(),
                f.trial.to_string(),
                f.fold.to_string(),
                opt(f.test_env.map(|v| v.to_string())),
                opt(f.validation_env.map(|v| v.to_string())),
                opt(f.threshold.map(|v| v.to_string())),
            ];
            row.extend(names.iter().map(|n| opt(f.metrics.get(*n).map(|v| v.to_string()))));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn regression_scores(
    model: &MlpModel,
    env: &TabularDataset,
    original_target: ArrayView1<'_, f64>,
    y_mean: f64,
    y_std: f64,
) -> Result<f64> {
    let pred = model.predict(env.features())? * y_std + y_mean;
    rmse(pred.view(), original_target)
}

fn class_scores(model: &MlpModel, env: &TabularDataset) -> Result<ClassificationMetrics> {
    let pred: Vec<usize> = model
        .predict(env.features())?
        .iter()
        .map(|&v| v as usize)
        .collect();
    classification_metrics(&pred, &env.class_labels())
}

/// One fold: environment `test` is held out; the rest are standardized with
/// their own statistics (features, and the target for regression).
fn run_fold(
    envs: &EnvironmentSet,
    method: Method,
    cfg: &MlpTrainConfig,
    trial: usize,
    test: usize,
) -> Result<FoldRecord> {
    let m = envs.len();
    let rest: Vec<usize> = (0..m).filter(|&i| i != test).collect();
    let rest_set = envs.subset(&rest)?;
    let scaler = Standardizer::fit_guarded(&rest_set);
    let regression = envs.task() == Task::Regression;
    let (y_mean, y_std) = if regression {
        let pooled = rest_set.pooled();
        let y = pooled.target();
        let mean = y.mean().expect("non-empty");
        let std = y.std(0.0);
        (mean, if std > 0.0 { std } else { 1.0 })
    } else {
        (0.0, 1.0)
    };
    let prepare = |env: &TabularDataset| -> Result<TabularDataset> {
        let z = scaler.apply(env)?;
        if regression {
            z.with_target(env.target().mapv(|y| (y - y_mean) / y_std))
        } else {
            Ok(z)
        }
    };
    let std_envs: Vec<TabularDataset> = envs.iter().map(prepare).collect::<Result<_>>()?;
    let std_all = EnvironmentSet::new(std_envs)?;

    let (model, train_idx, validation_env, threshold) = match method {
        Method::Erm => {
            let train = std_all.subset(&rest)?;
            (train_mlp_erm(&train, cfg)?, rest.clone(), None, None)
        }
        Method::CgLearn => {
            let (&val, train_idx) = rest.split_last().expect("m >= 3");
            if train_idx.len() < 2 {
                return Err(invalid(format!(
                    "CGLearn needs two training environments plus validation and test; got {m} environments"
                )));
            }
            let train = std_all.subset(train_idx)?;
            let (t, model) = select_mlp_threshold(&train, std_all.get(val).expect("index"), cfg)?;
            (model, train_idx.to_vec(), Some(val), Some(t))
        }
        Method::IrmV1 => {
            return Err(Error::Config(
                "IRMv1 is only available for linear regression scenarios".into(),
            ))
        }
    };

    let mut metrics = BTreeMap::new();
    let train_std = std_all.subset(&train_idx)?.pooled();
    let test_std = std_all.get(test).expect("index");
    if regression {
        let train_raw = envs.subset(&train_idx)?.pooled();
        let test_raw = envs.get(test).expect("index");
        metrics.insert(
            metric::RMSE_TRAIN.to_string(),
            regression_scores(&model, &train_std, train_raw.target(), y_mean, y_std)?,
        );
        metrics.insert(
            metric::RMSE_TEST.to_string(),
            regression_scores(&model, test_std, test_raw.target(), y_mean, y_std)?,
        );
    } else {
        for (env, acc, f1, f1m) in [
            (&train_std, metric::ACCURACY_TRAIN, metric::F1_TRAIN, metric::F1_MACRO_TRAIN),
            (test_std, metric::ACCURACY_TEST, metric::F1_TEST, metric::F1_MACRO_TEST),
        ] {
            let s = class_scores(&model, env)?;
            metrics.insert(acc.to_string(), s.accuracy);
            metrics.insert(f1.to_string(), s.f1_weighted);
            metrics.insert(f1m.to_string(), s.f1_macro);
        }
    }
    Ok(FoldRecord {
        trial,
        fold: test,
        test_env: Some(test),
        validation_env,
        threshold,
        metrics,
    })
}

/// Every environment is the test environment once per trial. ERM trains on
/// all other environments; CGLearn holds out the highest-index remaining one
/// to select its threshold. Trials differ only in the network seed,
/// `derive_seed(cfg.seed, trial)`.
pub fn leave_one_env_out(
    envs: &EnvironmentSet,
    method: Method,
    cfg: &MlpTrainConfig,
    trials: usize,
) -> Result<EvalReport> {
    if envs.len() < 3 {
        return Err(invalid(format!(
            "leave-one-environment-out needs at least 3 environments, got {}",
            envs.len()
        )));
    }
    if trials == 0 {
        return Err(Error::Config("trials must be positive".into()));
    }
    cfg.validate()?;
    let jobs: Vec<(usize, usize)> = (0..trials)
        .flat_map(|t| (0..envs.len()).map(move |f| (t, f)))
        .collect();
    let folds = jobs
        .par_iter()
        .map(|&(trial, test)| {
            let trial_cfg = MlpTrainConfig {
                seed: derive_seed(cfg.seed, trial as u64),
                ..cfg.clone()
            };
            run_fold(envs, method, &trial_cfg, trial, test)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_folds(method, folds))
}
