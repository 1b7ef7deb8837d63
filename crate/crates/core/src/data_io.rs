//! CSV loading and train-only standardization.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{EnvironmentSet, TabularDataset, Task};
use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    Classification,
}

/// Where a dataset lives and what it should look like.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub path: PathBuf,
    pub target: String,
    pub task: TaskKind,
    #[serde(default)]
    pub n_expected: Option<usize>,
    #[serde(default)]
    pub d_expected: Option<usize>,
    /// Field separator; sniffed from the header (`,` or `;`) when absent.
    #[serde(default)]
    pub delimiter: Option<char>,
}

/// The four benchmark datasets, expected as `<data_dir>/<name>.csv`.
pub fn builtin_spec(name: &str, data_dir: &Path) -> Option<DatasetSpec> {
    let (file, target, task, n, d) = match name {
        "boston" => ("boston.csv", "MEDV", TaskKind::Regression, 506, 13),
        "yacht" => ("yacht.csv", "residuary_resistance", TaskKind::Regression, 308, 6),
        "wine-red" => ("winequality-red.csv", "quality", TaskKind::Classification, 1599, 11),
        "wine-white" => ("winequality-white.csv", "quality", TaskKind::Classification, 4898, 11),
        _ => return None,
    };
    Some(DatasetSpec {
        name: name.to_string(),
        path: data_dir.join(file),
        target: target.to_string(),
        task,
        n_expected: Some(n),
        d_expected: Some(d),
        delimiter: None,
    })
}

pub const BUILTIN_DATASETS: [&str; 4] = ["boston", "yacht", "wine-red", "wine-white"];

/// A loaded dataset plus, for classification, the original target value of
/// each class index.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub dataset: TabularDataset,
    pub class_values: Option<Vec<f64>>,
}

fn sniff_delimiter(path: &Path) -> Result<u8> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
    let header = text.lines().next().unwrap_or("");
    Ok(if header.contains(';') && !header.contains(',') {
        b';'
    } else {
        b','
    })
}

pub fn load_csv(spec: &DatasetSpec) -> Result<LoadedDataset> {
    let delimiter = match spec.delimiter {
        Some(c) if c.is_ascii() => c as u8,
        Some(c) => return Err(Error::Config(format!("delimiter {c:?} is not ASCII"))),
        None => sniff_delimiter(&spec.path)?,
    };
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .trim(csv::Trim::All)
        .from_path(&spec.path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", spec.path.display())))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: bad header: {e}", spec.path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let target_col = headers
        .iter()
        .position(|h| h == &spec.target)
        .ok_or_else(|| Error::Data(format!("{}: missing target column {:?}", spec.name, spec.target)))?;
    let feature_names: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != target_col)
        .map(|(_, h)| h.clone())
        .collect();
    let d = feature_names.len();

    let mut values = Vec::new();
    let mut raw_target = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Data(format!("{}: row {}: {e}", spec.name, r + 1)))?;
        if record.len() != headers.len() {
            return Err(Error::Data(format!(
                "{}: row {} has {} fields, expected {}",
                spec.name,
                r + 1,
                record.len(),
                headers.len()
            )));
        }
        for (c, cell) in record.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!(
                    "{}: non-numeric cell {cell:?} at row {}, column {:?}",
                    spec.name,
                    r + 1,
                    headers[c]
                ))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: non-finite value at row {}, column {:?}",
                    spec.name,
                    r + 1,
                    headers[c]
                )));
            }
            if c == target_col {
                raw_target.push(v);
            } else {
                values.push(v);
            }
        }
    }
    let n = raw_target.len();
    if let Some(expected) = spec.n_expected {
        if n != expected {
            return Err(Error::Data(format!("{}: expected {expected} rows, found {n}", spec.name)));
        }
    }
    if let Some(expected) = spec.d_expected {
        if d != expected {
            return Err(Error::Data(format!("{}: expected {expected} features, found {d}", spec.name)));
        }
    }
    let features = Array2::from_shape_vec((n, d), values).map_err(|e| Error::Data(e.to_string()))?;

    let (target, task, class_values) = match spec.task {
        TaskKind::Regression => (Array1::from(raw_target), Task::Regression, None),
        TaskKind::Classification => {
            let (idx, classes) = index_classes(&raw_target);
            if classes.len() < 2 {
                return Err(Error::Data(format!("{}: fewer than two classes", spec.name)));
            }
            let task = Task::Classification {
                n_classes: classes.len(),
            };
            (idx, task, Some(classes))
        }
    };
    let dataset = TabularDataset::new(features, target, feature_names, task)?;
    Ok(LoadedDataset {
        dataset,
        class_values,
    })
}

/// Maps observed values to contiguous indices in ascending value order.
pub fn index_classes(raw: &[f64]) -> (Array1<f64>, Vec<f64>) {
    let mut classes: Vec<f64> = raw.to_vec();
    classes.sort_by(f64::total_cmp);
    classes.dedup();
    let idx = raw
        .iter()
        .map(|v| classes.binary_search_by(|c| c.total_cmp(v)).expect("present") as f64)
        .collect();
    (idx, classes)
}

/// Per-feature mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl Standardizer {
    /// Statistics of the pooled training rows. A constant column is an error.
    pub fn fit(train: &EnvironmentSet) -> Result<Self> {
        let s = Self::fit_raw(train)?;
        if let Some(j) = s.std.iter().position(|&v| v <= 0.0) {
            return Err(Error::Data(format!(
                "feature {:?} has zero variance in the training environments",
                train.get(0).map(|e| e.feature_names()[j].clone()).unwrap_or_default()
            )));
        }
        Ok(s)
    }

    /// Like [`Standardizer::fit`], but constant columns get a unit scale.
    pub fn fit_guarded(train: &EnvironmentSet) -> Self {
        let mut s = Self::fit_raw(train).expect("non-empty environment set");
        s.std.mapv_inplace(|v| if v > 0.0 { v } else { 1.0 });
        s
    }

    fn fit_raw(train: &EnvironmentSet) -> Result<Self> {
        let pooled = train.pooled();
        if pooled.is_empty() {
            return Err(invalid("training environments have no rows"));
        }
        let x = pooled.features();
        let mean = x.mean_axis(Axis(0)).expect("non-empty");
        let std = x.std_axis(Axis(0), 0.0);
        Ok(Self { mean, std })
    }

    pub fn apply(&self, env: &TabularDataset) -> Result<TabularDataset> {
        if env.n_features() != self.mean.len() {
            return Err(invalid("standardizer width does not match the dataset"));
        }
        let z = (&env.features() - &self.mean) / &self.std;
        env.with_features(z)
    }

    pub fn apply_all(&self, envs: &EnvironmentSet) -> Result<EnvironmentSet> {
        envs.map(|e| self.apply(e))
    }
}
