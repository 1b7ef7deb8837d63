//! Tabular data carriers shared by every trainer.

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Task {
    Regression,
    Classification { n_classes: usize },
}

impl Task {
    pub fn is_regression(&self) -> bool {
        matches!(self, Task::Regression)
    }
}

/// A feature matrix with its target column.
///
/// Classification targets are stored as class indices in `f64` so both task
/// kinds share one layout; [`TabularDataset::class_labels`] recovers them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDataset {
    features: Array2<f64>,
    target: Array1<f64>,
    feature_names: Vec<String>,
    task: Task,
}

impl TabularDataset {
    pub fn new(
        features: Array2<f64>,
        target: Array1<f64>,
        feature_names: Vec<String>,
        task: Task,
    ) -> Result<Self> {
        if features.nrows() != target.len() {
            return Err(invalid(format!(
                "feature rows ({}) and target length ({}) differ",
                features.nrows(),
                target.len()
            )));
        }
        if feature_names.len() != features.ncols() {
            return Err(invalid(format!(
                "{} feature names for {} columns",
                feature_names.len(),
                features.ncols()
            )));
        }
        if let Some(((r, c), _)) = features.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite feature at row {r}, column {c}")));
        }
        if let Some((r, _)) = target.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite target at row {r}")));
        }
        if let Task::Classification { n_classes } = task {
            if n_classes < 2 {
                return Err(invalid("classification needs at least two classes"));
            }
            for (r, &y) in target.iter().enumerate() {
                if y.fract() != 0.0 || y < 0.0 || y >= n_classes as f64 {
                    return Err(Error::Data(format!(
                        "class target {y} at row {r} outside [0, {n_classes})"
                    )));
                }
            }
        }
        Ok(Self {
            features,
            target,
            feature_names,
            task,
        })
    }

    /// Regression dataset with generated names `x1..xd`.
    pub fn regression(features: Array2<f64>, target: Array1<f64>) -> Result<Self> {
        let names = default_feature_names(features.ncols());
        Self::new(features, target, names, Task::Regression)
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn target(&self) -> ArrayView1<'_, f64> {
        self.target.view()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn n_rows(&self) -> usize {
        self.features.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.n_rows() == 0
    }

    pub fn class_labels(&self) -> Vec<usize> {
        self.target.iter().map(|&y| y as usize).collect()
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            features: self.features.select(Axis(0), rows),
            target: self.target.select(Axis(0), rows),
            feature_names: self.feature_names.clone(),
            task: self.task,
        }
    }

    /// Same rows with the feature matrix replaced (used by standardization).
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        Self::new(features, self.target.clone(), self.feature_names.clone(), self.task)
    }

    pub fn with_target(&self, target: Array1<f64>) -> Result<Self> {
        Self::new(self.features.clone(), target, self.feature_names.clone(), self.task)
    }

    pub fn head(&self, n: usize) -> Self {
        let n = n.min(self.n_rows());
        Self {
            features: self.features.slice(s![..n, ..]).to_owned(),
            target: self.target.slice(s![..n]).to_owned(),
            feature_names: self.feature_names.clone(),
            task: self.task,
        }
    }

    /// Writes the dataset as CSV with a header of feature names plus `target`.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push("target");
        w.write_record(&header)?;
        for (row, y) in self.features.outer_iter().zip(self.target.iter()) {
            let mut record: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            record.push(y.to_string());
            w.write_record(&record)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub fn default_feature_names(d: usize) -> Vec<String> {
    (1..=d).map(|j| format!("x{j}")).collect()
}

/// Ordered, schema-compatible environments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentSet {
    environments: Vec<TabularDataset>,
}

impl EnvironmentSet {
    pub fn new(environments: Vec<TabularDataset>) -> Result<Self> {
        let first = environments
            .first()
            .ok_or_else(|| invalid("an environment set needs at least one environment"))?;
        for (i, env) in environments.iter().enumerate().skip(1) {
            if env.n_features() != first.n_features()
                || env.task() != first.task()
                || env.feature_names() != first.feature_names()
            {
                return Err(invalid(format!(
                    "environment {i} is not schema-compatible with environment 0"
                )));
            }
        }
        Ok(Self { environments })
    }

    pub fn len(&self) -> usize {
        self.environments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.environments.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, TabularDataset> {
        self.environments.iter()
    }

    pub fn get(&self, i: usize) -> Option<&TabularDataset> {
        self.environments.get(i)
    }

    pub fn environments(&self) -> &[TabularDataset] {
        &self.environments
    }

    pub fn into_inner(self) -> Vec<TabularDataset> {
        self.environments
    }

    pub fn n_features(&self) -> usize {
        self.environments[0].n_features()
    }

    pub fn task(&self) -> Task {
        self.environments[0].task()
    }

    pub fn total_rows(&self) -> usize {
        self.environments.iter().map(TabularDataset::n_rows).sum()
    }

    /// Environments at the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let envs = indices
            .iter()
            .map(|&i| {
                self.environments
                    .get(i)
                    .cloned()
                    .ok_or_else(|| invalid(format!("environment index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(envs)
    }

    /// All rows stacked in environment order.
    pub fn pooled(&self) -> TabularDataset {
        let xs: Vec<_> = self.environments.iter().map(|e| e.features.view()).collect();
        let ys: Vec<_> = self.environments.iter().map(|e| e.target.view()).collect();
        let first = &self.environments[0];
        TabularDataset {
            features: concatenate(Axis(0), &xs).expect("schema-compatible environments"),
            target: concatenate(Axis(0), &ys).expect("schema-compatible environments"),
            feature_names: first.feature_names.clone(),
            task: first.task,
        }
    }

    pub fn map<F>(&self, f: F) -> Result<Self>
    where
        F: FnMut(&TabularDataset) -> Result<TabularDataset>,
    {
        Self::new(self.environments.iter().map(f).collect::<Result<Vec<_>>>()?)
    }
}

impl<'a> IntoIterator for &'a EnvironmentSet {
    type Item = &'a TabularDataset;
    type IntoIter = std::slice::Iter<'a, TabularDataset>;

    fn into_iter(self) -> Self::IntoIter {
        self.environments.iter()
    }
}
