//! Scenario runner behind the `cglearn` command-line tool.
//!
//! A run produces three files in the output directory:
//! `summary.csv` (one row per case, method and metric), `trials.jsonl`
//! (one JSON object per trial and fold) and `summary.txt` (a printed table
//! whose first line carries the only timestamp).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data_io::{builtin_spec, load_csv, DatasetSpec, TaskKind};
use crate::dataset::{EnvironmentSet, TabularDataset};
use crate::envcluster::{build_environments, describe_sizes};
use crate::error::{invalid, Error, Result};
use crate::eval::{coefficient_errors, leave_one_env_out, metric, EvalReport, FoldRecord, Method};
use crate::gradcheck::{check_linear, check_mlp, GradCheckReport};
use crate::lingrad::{select_threshold, train_erm, train_irmv1, LinearModel, StepSize, TrainConfig};
use crate::mlp::MlpTrainConfig;
use crate::rng::derive_seed;
use crate::synthgen::{
    generate_environments, generate_two_feature_demo, split_into_batches, SemCase, SemConfig,
    DEMO_CAUSAL_COEFFICIENT,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    LinearMulti,
    LinearSingle,
    RealRegression,
    RealClassification,
    TwoFeatureDemo,
    Gradcheck,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::LinearMulti,
        Scenario::LinearSingle,
        Scenario::RealRegression,
        Scenario::RealClassification,
        Scenario::TwoFeatureDemo,
        Scenario::Gradcheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::LinearMulti => "linear-multi",
            Scenario::LinearSingle => "linear-single",
            Scenario::RealRegression => "real-regression",
            Scenario::RealClassification => "real-classification",
            Scenario::TwoFeatureDemo => "two-feature-demo",
            Scenario::Gradcheck => "gradcheck",
        }
    }

    fn default_trials(self) -> usize {
        match self {
            Scenario::RealRegression | Scenario::RealClassification => 10,
            _ => 50,
        }
    }

    fn default_methods(self) -> Vec<Method> {
        match self {
            Scenario::LinearMulti => vec![Method::Erm, Method::CgLearn, Method::IrmV1],
            _ => vec![Method::Erm, Method::CgLearn],
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        Scenario::ALL
            .into_iter()
            .find(|sc| sc.name() == key)
            .ok_or_else(|| {
                let names: Vec<_> = Scenario::ALL.iter().map(|s| s.name()).collect();
                Error::Config(format!("unknown scenario {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DemoConfig {
    pub e_values: Vec<f64>,
    pub n_samples: usize,
    /// Index into `e_values` of the environment used to pick the threshold.
    /// The default, `e = 0.2`, is where the spurious feature carries almost
    /// no signal about the target.
    pub validation_index: usize,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            e_values: vec![0.2, 2.0, 5.0],
            n_samples: 1000,
            validation_index: 0,
        }
    }
}

/// Everything a run needs. Loaded from TOML; every field has a default.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    /// Defaults to 50 for synthetic scenarios and 10 for real data.
    pub trials: Option<usize>,
    pub seed: u64,
    pub methods: Option<Vec<Method>>,
    /// SEM case codes for the linear scenarios (default: all eight).
    pub cases: Vec<String>,
    /// Base generator settings; the case fields are overwritten per case.
    pub sem: SemConfig,
    /// Environment value of the single-environment scenario.
    pub single_env_value: f64,
    pub batches: Vec<usize>,
    pub linear: TrainConfig,
    /// IRMv1 penalty candidates, chosen on the validation environment.
    pub irm_penalty_weights: Vec<f64>,
    /// Fixed consistency threshold instead of validation selection.
    pub threshold: Option<f64>,
    /// Built-in dataset name (`boston`, `yacht`, `wine-red`, `wine-white`).
    pub dataset: Option<String>,
    /// Explicit dataset description; takes precedence over `dataset`.
    pub dataset_spec: Option<DatasetSpec>,
    pub data_dir: PathBuf,
    pub k_min: usize,
    pub k_max: usize,
    pub mlp: MlpTrainConfig,
    pub demo: DemoConfig,
    pub gradcheck_instances: usize,
    pub output: PathBuf,
    /// Write the generated environments of trial 0 as CSV files here.
    pub export_envs: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            scenario: Scenario::LinearMulti,
            trials: None,
            seed: 0,
            methods: None,
            cases: SemCase::all().iter().map(SemCase::code).collect(),
            sem: SemConfig::default(),
            single_env_value: 2.0,
            batches: vec![3, 5],
            linear: TrainConfig {
                step_size: StepSize::InverseCurvature(1.0),
                ..TrainConfig::default()
            },
            irm_penalty_weights: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            threshold: None,
            dataset: None,
            dataset_spec: None,
            data_dir: PathBuf::from("data"),
            k_min: 3,
            k_max: 10,
            mlp: MlpTrainConfig::default(),
            demo: DemoConfig::default(),
            gradcheck_instances: 50,
            output: PathBuf::from("results"),
            export_envs: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn trials(&self) -> usize {
        self.trials.unwrap_or_else(|| self.scenario.default_trials())
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m = self
            .methods
            .clone()
            .unwrap_or_else(|| self.scenario.default_methods());
        m.sort();
        m.dedup();
        m
    }

    fn sem_cases(&self) -> Result<Vec<SemCase>> {
        self.cases.iter().map(|c| SemCase::parse(c)).collect()
    }

    fn linear_config(&self) -> TrainConfig {
        let mut c = self.linear.clone();
        if let Some(t) = self.threshold {
            c.thresholds = vec![t];
        }
        c
    }

    fn mlp_config(&self) -> MlpTrainConfig {
        let mut c = self.mlp.clone();
        c.seed = self.seed;
        if let Some(t) = self.threshold {
            c.thresholds = vec![t];
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials() == 0 {
            return Err(Error::Config("trials must be positive".into()));
        }
        if self.methods().is_empty() {
            return Err(Error::Config("at least one method is required".into()));
        }
        if let Some(t) = self.threshold {
            if !(t >= 0.0) {
                return Err(Error::Config(format!("threshold must be non-negative, got {t}")));
            }
        }
        match self.scenario {
            Scenario::LinearMulti | Scenario::LinearSingle => {
                self.sem.validate()?;
                self.linear_config().validate()?;
                if self.sem_cases()?.is_empty() {
                    return Err(Error::Config("no SEM cases selected".into()));
                }
                if self.methods().contains(&Method::IrmV1) && self.irm_penalty_weights.is_empty() {
                    return Err(Error::Config("irm_penalty_weights must not be empty".into()));
                }
                if self.irm_penalty_weights.iter().any(|l| !(*l >= 0.0)) {
                    return Err(Error::Config("IRMv1 penalty weights must be non-negative".into()));
                }
            }
            Scenario::RealRegression | Scenario::RealClassification => {
                self.mlp_config().validate()?;
                if self.k_min < 2 || self.k_min > self.k_max {
                    return Err(Error::Config(format!(
                        "bad cluster range {}..={}",
                        self.k_min, self.k_max
                    )));
                }
                if self.methods().contains(&Method::IrmV1) {
                    return Err(Error::Config(
                        "IRMv1 is only available for the linear scenarios".into(),
                    ));
                }
            }
            Scenario::TwoFeatureDemo => {
                self.linear_config().validate()?;
                if self.demo.e_values.len() < 3 {
                    return Err(Error::Config(
                        "the demo needs two training environments and one validation environment"
                            .into(),
                    ));
                }
                if self.demo.validation_index >= self.demo.e_values.len() {
                    return Err(Error::Config("demo.validation_index is out of range".into()));
                }
            }
            Scenario::Gradcheck => {
                if self.gradcheck_instances == 0 {
                    return Err(Error::Config("gradcheck_instances must be positive".into()));
                }
            }
        }
        if self.scenario == Scenario::LinearSingle {
            if self.batches.iter().any(|&b| b < 3) || self.batches.is_empty() {
                return Err(Error::Config(
                    "batch counts must be at least 3 (two training batches plus validation)".into(),
                ));
            }
            if !(self.single_env_value > 0.0) {
                return Err(Error::Config("single_env_value must be positive".into()));
            }
        }
        Ok(())
    }

    /// The dataset for the real-data scenarios.
    pub fn resolve_dataset(&self) -> Result<DatasetSpec> {
        if let Some(spec) = &self.dataset_spec {
            return Ok(spec.clone());
        }
        let name = match (&self.dataset, self.scenario) {
            (Some(n), _) => n.as_str(),
            (None, Scenario::RealClassification) => "wine-red",
            (None, _) => "boston",
        };
        builtin_spec(name, &self.data_dir).ok_or_else(|| {
            Error::Config(format!(
                "unknown dataset {name:?}; use one of boston, yacht, wine-red, wine-white or give a dataset_spec"
            ))
        })
    }
}

/// One line of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario: String,
    pub case: String,
    pub method: String,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
    pub p_vs_erm: Option<f64>,
    pub significant: Option<bool>,
}

/// One line of `trials.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialLine {
    pub scenario: String,
    pub case: String,
    pub method: String,
    #[serde(flatten)]
    pub record: FoldRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentOutput {
    pub scenario: Scenario,
    /// `(case, report)` in run order.
    pub reports: Vec<(String, EvalReport)>,
    pub summary: Vec<SummaryRow>,
    pub lines: Vec<TrialLine>,
    /// Free-form context printed above the table (cluster sizes and so on).
    pub notes: Vec<String>,
    pub gradcheck: Vec<GradCheckReport>,
}

impl ExperimentOutput {
    pub fn checks_passed(&self) -> bool {
        self.gradcheck.iter().all(GradCheckReport::passed)
    }

    pub fn report(&self, case: &str, method: Method) -> Option<&EvalReport> {
        self.reports
            .iter()
            .find(|(c, r)| c == case && r.method == method)
            .map(|(_, r)| r)
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "scenario",
            "case",
            "method",
            "metric",
            "mean",
            "std",
            "n",
            "p_vs_erm",
            "significant",
        ])?;
        for r in &self.summary {
            w.write_record([
                r.scenario.clone(),
                r.case.clone(),
                r.method.clone(),
                r.metric.clone(),
                r.mean.to_string(),
                r.std.to_string(),
                r.n.to_string(),
                r.p_vs_erm.map(|p| p.to_string()).unwrap_or_default(),
                r.significant.map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn trials_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for line in &self.lines {
            out.push_str(&serde_json::to_string(line)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// Fixed-width table of the summary rows.
    pub fn table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<12} {:<8} {:<18} {:>14} {:>12} {:>4} {:>10} {:>4}\n",
            "case", "method", "metric", "mean", "std", "n", "p_vs_erm", "sig"
        ));
        for r in &self.summary {
            s.push_str(&format!(
                "{:<12} {:<8} {:<18} {:>14} {:>12} {:>4} {:>10} {:>4}\n",
                r.case,
                r.method,
                r.metric,
                fmt_num(r.mean),
                fmt_num(r.std),
                r.n,
                r.p_vs_erm.map(|p| format!("{p:.2e}")).unwrap_or_else(|| "-".into()),
                match r.significant {
                    Some(true) => "*",
                    Some(false) => "",
                    None => "-",
                }
            ));
        }
        s
    }

    /// Writes `summary.csv`, `trials.jsonl` and `summary.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.csv"), self.summary_csv()?)?;
        fs::write(dir.join("trials.jsonl"), self.trials_jsonl()?)?;
        let stamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        let mut f = fs::File::create(dir.join("summary.txt"))?;
        writeln!(f, "# generated_at_unix: {stamp}")?;
        writeln!(f, "# scenario: {}", self.scenario)?;
        for note in &self.notes {
            writeln!(f, "# {note}")?;
        }
        f.write_all(self.table().as_bytes())?;
        Ok(())
    }
}

fn fmt_num(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e6) {
        format!("{v:.4e}")
    } else {
        format!("{v:.6}")
    }
}

fn record(
    trial: usize,
    validation_env: Option<usize>,
    threshold: Option<f64>,
    metrics: &[(&str, f64)],
) -> FoldRecord {
    FoldRecord {
        trial,
        fold: 0,
        test_env: None,
        validation_env,
        threshold,
        metrics: metrics.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
    }
}

/// Picks the IRMv1 penalty weight with the lowest validation MSE. Candidates
/// whose training diverges are skipped.
fn select_irm(
    train: &EnvironmentSet,
    validation: &TabularDataset,
    cfg: &TrainConfig,
    weights: &[f64],
) -> Result<(f64, LinearModel)> {
    let mut sorted = weights.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut best: Option<(f64, LinearModel, f64)> = None;
    let mut last_err = None;
    for lambda in sorted {
        match train_irmv1(train, cfg, lambda) {
            Ok(model) => {
                let mse = model.mse(validation);
                if best.as_ref().is_none_or(|b| mse < b.2) {
                    best = Some((lambda, model, mse));
                }
            }
            Err(e @ Error::Divergence { .. }) => last_err = Some(e),
            Err(e) => return Err(e),
        }
    }
    match best {
        Some((l, m, _)) => Ok((l, m)),
        None => Err(last_err.unwrap_or_else(|| invalid("no IRMv1 penalty candidates"))),
    }
}

/// Fits each method on one synthetic draw: ERM on every environment, the
/// others on `train` with `validation` for model selection.
fn fit_linear_methods(
    cfg: &ExperimentConfig,
    methods: &[Method],
    all: &EnvironmentSet,
    train: &EnvironmentSet,
    validation: &TabularDataset,
) -> Result<Vec<(Method, LinearModel, Option<f64>)>> {
    let lin = cfg.linear_config();
    methods
        .iter()
        .map(|&m| {
            Ok(match m {
                Method::Erm => (m, train_erm(all, &lin)?, None),
                Method::CgLearn => {
                    let (t, model, _) = select_threshold(train, validation, &lin)?;
                    (m, model, Some(t))
                }
                Method::IrmV1 => {
                    let (l, model) = select_irm(train, validation, &lin, &cfg.irm_penalty_weights)?;
                    (m, model, Some(l))
                }
            })
        })
        .collect()
}

fn export(dir: &Path, case: &str, envs: &EnvironmentSet) -> Result<()> {
    let sub = dir.join(case);
    fs::create_dir_all(&sub)?;
    for (i, env) in envs.iter().enumerate() {
        env.write_csv(fs::File::create(sub.join(format!("env_{i}.csv")))?)?;
    }
    Ok(())
}

type CaseTrials = Vec<(Method, FoldRecord)>;

fn trial_seed(cfg: &ExperimentConfig, case_index: usize, trial: usize) -> u64 {
    derive_seed(derive_seed(cfg.seed, case_index as u64), trial as u64)
}

fn run_linear_multi(cfg: &ExperimentConfig) -> Result<Vec<(String, CaseTrials)>> {
    let methods = cfg.methods();
    let mut out = Vec::new();
    for (ci, case) in cfg.sem_cases()?.into_iter().enumerate() {
        let code = case.code();
        let per_trial: Vec<CaseTrials> = (0..cfg.trials())
            .into_par_iter()
            .map(|trial| {
                let sem = SemConfig {
                    scrambling: case.scrambling,
                    observation: case.observation,
                    noise: case.noise,
                    seed: trial_seed(cfg, ci, trial),
                    ..cfg.sem.clone()
                };
                let (envs, truth) = generate_environments(&sem)?;
                if envs.len() < 3 {
                    return Err(Error::Config(
                        "linear-multi needs at least three environment values".into(),
                    ));
                }
                if trial == 0 {
                    if let Some(dir) = &cfg.export_envs {
                        export(dir, &code, &envs)?;
                    }
                }
                let val = envs.len() - 1;
                let train = envs.subset(&(0..val).collect::<Vec<_>>())?;
                let validation = envs.get(val).expect("index");
                fit_linear_methods(cfg, &methods, &envs, &train, validation)?
                    .into_iter()
                    .map(|(m, model, t)| {
                        let (c, n) = coefficient_errors(&model, &truth)?;
                        let v = (m != Method::Erm).then_some(val);
                        Ok((
                            m,
                            record(trial, v, t, &[(metric::CAUSAL_ERROR, c), (metric::NONCAUSAL_ERROR, n)]),
                        ))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        out.push((code, per_trial.into_iter().flatten().collect()));
    }
    Ok(out)
}

fn run_linear_single(cfg: &ExperimentConfig) -> Result<Vec<(String, CaseTrials)>> {
    let methods = cfg.methods();
    let mut out = Vec::new();
    for (ci, case) in cfg.sem_cases()?.into_iter().enumerate() {
        for &b in &cfg.batches {
            let label = format!("{}-b{b}", case.code());
            let per_trial: Vec<CaseTrials> = (0..cfg.trials())
                .into_par_iter()
                .map(|trial| {
                    let seed = trial_seed(cfg, ci, trial);
                    let sem = SemConfig {
                        scrambling: case.scrambling,
                        observation: case.observation,
                        noise: case.noise,
                        env_values: vec![cfg.single_env_value],
                        seed,
                        ..cfg.sem.clone()
                    };
                    let (single, truth) = generate_environments(&sem)?;
                    let data = single.get(0).expect("one environment");
                    let batches = split_into_batches(data, b, derive_seed(seed, b as u64))?;
                    if trial == 0 {
                        if let Some(dir) = &cfg.export_envs {
                            export(dir, &label, &batches)?;
                        }
                    }
                    let val = b - 1;
                    let train = batches.subset(&(0..val).collect::<Vec<_>>())?;
                    let validation = batches.get(val).expect("index");
                    fit_linear_methods(cfg, &methods, &single, &train, validation)?
                        .into_iter()
                        .map(|(m, model, t)| {
                            let (c, n) = coefficient_errors(&model, &truth)?;
                            let v = (m != Method::Erm).then_some(val);
                            Ok((
                                m,
                                record(trial, v, t, &[(metric::CAUSAL_ERROR, c), (metric::NONCAUSAL_ERROR, n)]),
                            ))
                        })
                        .collect()
                })
                .collect::<Result<_>>()?;
            out.push((label, per_trial.into_iter().flatten().collect()));
        }
    }
    Ok(out)
}

pub const W1: &str = "w1";
pub const W2: &str = "w2";
pub const W1_ERROR: &str = "w1_abs_error";
pub const W2_ABS: &str = "w2_abs";

fn run_demo(cfg: &ExperimentConfig) -> Result<Vec<(String, CaseTrials)>> {
    let methods = cfg.methods();
    if methods.contains(&Method::IrmV1) && cfg.irm_penalty_weights.is_empty() {
        return Err(Error::Config("irm_penalty_weights must not be empty".into()));
    }
    let per_trial: Vec<CaseTrials> = (0..cfg.trials())
        .into_par_iter()
        .map(|trial| {
            let envs = generate_two_feature_demo(
                &cfg.demo.e_values,
                cfg.demo.n_samples,
                trial_seed(cfg, 0, trial),
            )?;
            if trial == 0 {
                if let Some(dir) = &cfg.export_envs {
                    export(dir, "demo", &envs)?;
                }
            }
            let val = cfg.demo.validation_index;
            let train = envs.subset(&(0..envs.len()).filter(|&i| i != val).collect::<Vec<_>>())?;
            let validation = envs.get(val).expect("index");
            Ok(fit_linear_methods(cfg, &methods, &envs, &train, validation)?
                .into_iter()
                .map(|(m, model, t)| {
                    let (w1, w2) = (model.weights[0], model.weights[1]);
                    let v = (m != Method::Erm).then_some(val);
                    (
                        m,
                        record(
                            trial,
                            v,
                            t,
                            &[
                                (W1, w1),
                                (W2, w2),
                                (W1_ERROR, (w1 - DEMO_CAUSAL_COEFFICIENT).abs()),
                                (W2_ABS, w2.abs()),
                            ],
                        ),
                    )
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    Ok(vec![("demo".to_string(), per_trial.into_iter().flatten().collect())])
}

fn run_real(cfg: &ExperimentConfig, notes: &mut Vec<String>) -> Result<Vec<(String, EvalReport)>> {
    let spec = cfg.resolve_dataset()?;
    let expected = match cfg.scenario {
        Scenario::RealClassification => TaskKind::Classification,
        _ => TaskKind::Regression,
    };
    if spec.task != expected {
        return Err(Error::Config(format!(
            "dataset {} is not a {} dataset",
            spec.name,
            if expected == TaskKind::Regression { "regression" } else { "classification" }
        )));
    }
    if !spec.path.exists() {
        return Err(Error::Data(format!(
            "dataset file {} not found; place the CSV there or pass --data-dir",
            spec.path.display()
        )));
    }
    let loaded = load_csv(&spec)?;
    let (envs, assignment) = build_environments(&loaded.dataset, cfg.k_min..=cfg.k_max, cfg.seed)?;
    notes.push(format!(
        "dataset {}: {} rows, {} features; k = {} (silhouette {:.4}), cluster sizes {}",
        spec.name,
        loaded.dataset.n_rows(),
        loaded.dataset.n_features(),
        assignment.k,
        assignment.silhouette,
        describe_sizes(&assignment)
    ));
    let mlp = cfg.mlp_config();
    cfg.methods()
        .into_iter()
        .map(|m| Ok((spec.name.clone(), leave_one_env_out(&envs, m, &mlp, cfg.trials())?)))
        .collect()
}

fn run_gradcheck(cfg: &ExperimentConfig) -> Result<Vec<GradCheckReport>> {
    Ok(vec![
        check_linear(cfg.gradcheck_instances, cfg.seed)?,
        check_mlp(cfg.gradcheck_instances, derive_seed(cfg.seed, 1))?,
    ])
}

fn summarize(scenario: Scenario, reports: &[(String, EvalReport)]) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    for (case, report) in reports {
        let erm = reports
            .iter()
            .find(|(c, r)| c == case && r.method == Method::Erm)
            .map(|(_, r)| r);
        for (name, agg) in &report.aggregates {
            let sig = match erm {
                Some(e) if report.method != Method::Erm => match report.compare(e, name) {
                    Ok(s) => Some(s),
                    Err(Error::InvalidInput(_)) => None,
                    Err(other) => return Err(other),
                },
                _ => None,
            };
            rows.push(SummaryRow {
                scenario: scenario.name().to_string(),
                case: case.clone(),
                method: report.method.name().to_string(),
                metric: name.clone(),
                mean: agg.mean,
                std: agg.std,
                n: agg.n,
                p_vs_erm: sig.map(|s| s.p_value),
                significant: sig.map(|s| s.significant),
            });
        }
    }
    Ok(rows)
}

/// Runs the configured scenario on the current rayon pool.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut notes = Vec::new();
    let mut gradcheck = Vec::new();
    let reports: Vec<(String, EvalReport)> = match cfg.scenario {
        Scenario::LinearMulti | Scenario::LinearSingle | Scenario::TwoFeatureDemo => {
            let cases = match cfg.scenario {
                Scenario::LinearMulti => run_linear_multi(cfg)?,
                Scenario::LinearSingle => run_linear_single(cfg)?,
                _ => run_demo(cfg)?,
            };
            let mut reports = Vec::new();
            for (case, trials) in cases {
                let mut by_method: BTreeMap<Method, Vec<FoldRecord>> = BTreeMap::new();
                for (m, r) in trials {
                    by_method.entry(m).or_default().push(r);
                }
                for (m, folds) in by_method {
                    reports.push((case.clone(), EvalReport::from_folds(m, folds)));
                }
            }
            reports
        }
        Scenario::RealRegression | Scenario::RealClassification => run_real(cfg, &mut notes)?,
        Scenario::Gradcheck => {
            gradcheck = run_gradcheck(cfg)?;
            Vec::new()
        }
    };

    let mut summary = summarize(cfg.scenario, &reports)?;
    let mut lines = Vec::new();
    for (case, report) in &reports {
        for f in &report.folds {
            lines.push(TrialLine {
                scenario: cfg.scenario.name().to_string(),
                case: case.clone(),
                method: report.method.name().to_string(),
                record: f.clone(),
            });
        }
    }
    for g in &gradcheck {
        notes.push(format!(
            "{} gradients: {} instances, {} parameters, max relative error {:.3e} (tolerance {:.0e}): {}",
            g.model,
            g.instances,
            g.parameters_checked,
            g.max_relative_error,
            g.tolerance,
            if g.passed() { "pass" } else { "FAIL" }
        ));
        summary.push(SummaryRow {
            scenario: cfg.scenario.name().to_string(),
            case: g.model.clone(),
            method: "analytic".to_string(),
            metric: "max_relative_error".to_string(),
            mean: g.max_relative_error,
            std: 0.0,
            n: g.instances,
            p_vs_erm: None,
            significant: None,
        });
        lines.push(TrialLine {
            scenario: cfg.scenario.name().to_string(),
            case: g.model.clone(),
            method: "analytic".to_string(),
            record: record(
                0,
                None,
                None,
                &[
                    ("max_relative_error", g.max_relative_error),
                    ("tolerance", g.tolerance),
                    ("parameters_checked", g.parameters_checked as f64),
                ],
            ),
        });
    }
    Ok(ExperimentOutput {
        scenario: cfg.scenario,
        reports,
        summary,
        lines,
        notes,
        gradcheck,
    })
}

/// Like [`run`], on a dedicated pool of `jobs` threads (`None`: all cores).
pub fn run_with_jobs(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentOutput> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(j) = jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be positive".into()));
        }
        builder = builder.num_threads(j);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| run(cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick(scenario: Scenario) -> ExperimentConfig {
        ExperimentConfig {
            scenario,
            trials: Some(3),
            cases: vec!["FOU".into(), "PES".into()],
            sem: SemConfig {
                n_samples: 200,
                ..SemConfig::default()
            },
            linear: TrainConfig {
                step_size: StepSize::InverseCurvature(1.0),
                steps: 200,
                ..TrainConfig::default()
            },
            batches: vec![3],
            demo: DemoConfig {
                n_samples: 200,
                ..DemoConfig::default()
            },
            gradcheck_instances: 5,
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn scenario_names_roundtrip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("linear".parse::<Scenario>().is_err());
    }

    #[test]
    fn toml_roundtrip_and_overrides() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            scenario = "linear-single"
            trials = 7
            methods = ["ERM", "CGLearn"]
            batches = [5]
            [linear]
            steps = 100
            step_size = { fixed = 0.01 }
            [sem]
            n_samples = 300
            "#,
        )
        .unwrap();
        assert_eq!(cfg.scenario, Scenario::LinearSingle);
        assert_eq!(cfg.trials(), 7);
        assert_eq!(cfg.linear.step_size, StepSize::Fixed(0.01));
        assert_eq!(cfg.sem.n_samples, 300);
        assert_eq!(cfg.sem.env_values, vec![0.2, 2.0, 5.0]);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(matches!(
            ExperimentConfig::from_toml_str("bogus = 1"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn default_trials_per_scenario() {
        assert_eq!(ExperimentConfig::default().trials(), 50);
        let real = ExperimentConfig {
            scenario: Scenario::RealRegression,
            ..ExperimentConfig::default()
        };
        assert_eq!(real.trials(), 10);
        assert!(ExperimentConfig {
            methods: Some(vec![Method::IrmV1]),
            ..real
        }
        .validate()
        .is_err());
    }

    #[test]
    fn linear_multi_outputs() {
        let out = run(&quick(Scenario::LinearMulti)).unwrap();
        // 2 cases x 3 methods x 2 metrics
        assert_eq!(out.summary.len(), 12);
        assert_eq!(out.lines.len(), 2 * 3 * 3);
        let erm_rows: Vec<_> = out.summary.iter().filter(|r| r.method == "ERM").collect();
        assert!(erm_rows.iter().all(|r| r.p_vs_erm.is_none()));
        assert!(out
            .summary
            .iter()
            .filter(|r| r.method != "ERM")
            .all(|r| r.p_vs_erm.is_some()));
        let csv = out.summary_csv().unwrap();
        assert!(csv.starts_with("scenario,case,method,metric,mean,std,n,p_vs_erm,significant\n"));
    }

    #[test]
    fn summary_recomputes_from_lines() {
        let out = run(&quick(Scenario::LinearSingle)).unwrap();
        for row in &out.summary {
            let vals: Vec<f64> = out
                .lines
                .iter()
                .filter(|l| l.case == row.case && l.method == row.method)
                .map(|l| l.record.metrics[&row.metric])
                .collect();
            let agg = crate::eval::Aggregate::of(&vals);
            assert!((agg.mean - row.mean).abs() <= 1e-12 * agg.mean.abs().max(1.0));
            assert!((agg.std - row.std).abs() <= 1e-12 * agg.std.abs().max(1.0));
        }
    }

    #[test]
    fn runs_are_deterministic() {
        for s in [Scenario::LinearMulti, Scenario::TwoFeatureDemo] {
            let a = run(&quick(s)).unwrap();
            let b = run_with_jobs(&quick(s), Some(2)).unwrap();
            assert_eq!(a.trials_jsonl().unwrap(), b.trials_jsonl().unwrap());
            assert_eq!(a.summary_csv().unwrap(), b.summary_csv().unwrap());
        }
    }

    #[test]
    fn gradcheck_scenario() {
        let out = run(&quick(Scenario::Gradcheck)).unwrap();
        assert!(out.checks_passed());
        assert_eq!(out.gradcheck.len(), 2);
        assert_eq!(out.summary.len(), 2);
    }

    #[test]
    fn fixed_threshold_override() {
        let cfg = ExperimentConfig {
            threshold: Some(4.0),
            methods: Some(vec![Method::CgLearn]),
            ..quick(Scenario::TwoFeatureDemo)
        };
        let out = run(&cfg).unwrap();
        assert!(out.lines.iter().all(|l| l.record.threshold == Some(4.0)));
    }

    #[test]
    fn missing_dataset_is_a_data_error() {
        let cfg = ExperimentConfig {
            scenario: Scenario::RealRegression,
            dataset: Some("yacht".into()),
            data_dir: PathBuf::from("/nonexistent"),
            ..ExperimentConfig::default()
        };
        assert!(matches!(run(&cfg), Err(Error::Data(_))));
        let wrong_task = ExperimentConfig {
            scenario: Scenario::RealClassification,
            dataset: Some("boston".into()),
            ..cfg
        };
        assert!(matches!(run(&wrong_task), Err(Error::Config(_))));
    }

    #[test]
    fn writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = run(&quick(Scenario::TwoFeatureDemo)).unwrap();
        out.write(dir.path()).unwrap();
        let txt = fs::read_to_string(dir.path().join("summary.txt")).unwrap();
        assert!(txt.lines().next().unwrap().starts_with("# generated_at_unix: "));
        assert!(!fs::read_to_string(dir.path().join("summary.csv")).unwrap().contains("generated"));
        assert_eq!(
            fs::read_to_string(dir.path().join("trials.jsonl")).unwrap().lines().count(),
            out.lines.len()
        );
    }

    #[test]
    fn exports_environments() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig {
            export_envs: Some(dir.path().to_path_buf()),
            ..quick(Scenario::LinearMulti)
        };
        run(&cfg).unwrap();
        let text = fs::read_to_string(dir.path().join("PES").join("env_2.csv")).unwrap();
        assert!(text.starts_with("x1,"));
        assert!(text.lines().next().unwrap().ends_with(",target"));
        assert_eq!(text.lines().count(), 201);
    }
}
