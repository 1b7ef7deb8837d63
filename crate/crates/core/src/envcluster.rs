//! Pseudo-environments for real tabular data via K-means and silhouette
//! model selection.

use std::ops::RangeInclusive;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data_io::Standardizer;
use crate::dataset::{EnvironmentSet, TabularDataset};
use crate::error::{invalid, Error, Result};
use crate::rng::{derive_seed, seeded, Rng};

pub const MAX_LLOYD_ITERATIONS: usize = 300;
pub const DEFAULT_RESTARTS: usize = 10;
pub const DEFAULT_K_RANGE: RangeInclusive<usize> = 3..=10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub k: usize,
    pub centroids: Array2<f64>,
    pub silhouette: f64,
    /// Within-cluster sum of squares after each Lloyd iteration of the
    /// winning restart.
    pub wcss_history: Vec<f64>,
}

impl ClusterAssignment {
    pub fn wcss(&self) -> f64 {
        self.wcss_history.last().copied().unwrap_or(0.0)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &l in &self.labels {
            sizes[l] += 1;
        }
        sizes
    }
}

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding.
fn init_centroids(x: ArrayView2<'_, f64>, k: usize, rng: &mut Rng) -> Array2<f64> {
    let n = x.nrows();
    let mut centroids = Array2::zeros((k, x.ncols()));
    let first = rng.random_range(0..n);
    centroids.row_mut(0).assign(&x.row(first));
    let mut nearest: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, x.row(first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).assign(&x.row(pick));
        for (i, r) in x.rows().into_iter().enumerate() {
            nearest[i] = nearest[i].min(sq_dist(r, centroids.row(c)));
        }
    }
    centroids
}

fn assign(x: ArrayView2<'_, f64>, centroids: &Array2<f64>, labels: &mut [usize]) -> f64 {
    let mut wcss = 0.0;
    for (i, r) in x.rows().into_iter().enumerate() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, cr) in centroids.rows().into_iter().enumerate() {
            let d = sq_dist(r, cr);
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        labels[i] = best;
        wcss += best_d;
    }
    wcss
}

/// Recomputes centroids; an emptied cluster takes the point farthest from
/// its current centroid.
fn update_centroids(x: ArrayView2<'_, f64>, labels: &mut [usize], k: usize) -> Array2<f64> {
    let d = x.ncols();
    let mut sums = Array2::<f64>::zeros((k, d));
    let mut counts = vec![0usize; k];
    for (r, &l) in x.rows().into_iter().zip(labels.iter()) {
        sums.row_mut(l).scaled_add(1.0, &r);
        counts[l] += 1;
    }
    for c in 0..k {
        if counts[c] > 0 {
            let cnt = counts[c] as f64;
            sums.row_mut(c).mapv_inplace(|v| v / cnt);
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            let far = x
                .rows()
                .into_iter()
                .enumerate()
                .filter(|(i, _)| counts[labels[*i]] > 1)
                .map(|(i, r)| (i, sq_dist(r, sums.row(labels[i]))))
                .max_by(|a, b| a.1.total_cmp(&b.1))
                .map(|(i, _)| i);
            if let Some(i) = far {
                counts[labels[i]] -= 1;
                labels[i] = c;
                counts[c] = 1;
                sums.row_mut(c).assign(&x.row(i));
            }
        }
    }
    sums
}

fn lloyd(x: ArrayView2<'_, f64>, k: usize, rng: &mut Rng) -> (Vec<usize>, Array2<f64>, Vec<f64>) {
    let mut centroids = init_centroids(x, k, rng);
    let mut labels = vec![usize::MAX; x.nrows()];
    let mut history = Vec::new();
    let mut prev = labels.clone();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let wcss = assign(x, &centroids, &mut labels);
        history.push(wcss);
        if labels == prev {
            break;
        }
        prev.clone_from(&labels);
        centroids = update_centroids(x, &mut labels, k);
    }
    (labels, centroids, history)
}

/// Best of `restarts` seeded k-means++/Lloyd runs by within-cluster sum of
/// squares.
pub fn kmeans(features: ArrayView2<'_, f64>, k: usize, seed: u64, restarts: usize) -> Result<ClusterAssignment> {
    let n = features.nrows();
    if k < 2 {
        return Err(invalid(format!("k must be at least 2, got {k}")));
    }
    if n < k {
        return Err(invalid(format!("cannot form {k} clusters from {n} rows")));
    }
    if restarts == 0 {
        return Err(invalid("restarts must be positive"));
    }
    let first = features.row(0);
    if features.rows().into_iter().all(|r| r == first) {
        return Err(Error::Clustering("all rows are identical".into()));
    }
    let mut best: Option<(Vec<usize>, Array2<f64>, Vec<f64>)> = None;
    for r in 0..restarts {
        let mut rng = seeded(derive_seed(seed, r as u64));
        let run = lloyd(features, k, &mut rng);
        let wcss = *run.2.last().expect("at least one iteration");
        if best.as_ref().is_none_or(|b| wcss < *b.2.last().unwrap()) {
            best = Some(run);
        }
    }
    let (labels, centroids, wcss_history) = best.expect("restarts > 0");
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    if sizes.contains(&0) {
        return Err(Error::Clustering(format!(
            "could not form {k} non-empty clusters (too few distinct rows)"
        )));
    }
    let silhouette = silhouette_score(features, &labels)?;
    Ok(ClusterAssignment {
        labels,
        k,
        centroids,
        silhouette,
        wcss_history,
    })
}

/// Mean silhouette coefficient with Euclidean distances; points alone in
/// their cluster score 0.
pub fn silhouette_score(features: ArrayView2<'_, f64>, labels: &[usize]) -> Result<f64> {
    let n = features.nrows();
    if labels.len() != n {
        return Err(invalid("one label per row is required"));
    }
    if n == 0 {
        return Err(invalid("no rows"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &l in labels {
        sizes[l] += 1;
    }
    let occupied = sizes.iter().filter(|&&s| s > 0).count();
    if occupied < 2 {
        return Err(invalid("silhouette needs at least two non-empty clusters"));
    }

    let mut total = 0.0;
    let mut dist_sums = vec![0.0; k];
    for i in 0..n {
        dist_sums.iter_mut().for_each(|s| *s = 0.0);
        let xi = features.row(i);
        for j in 0..n {
            if i != j {
                dist_sums[labels[j]] += sq_dist(xi, features.row(j)).sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = dist_sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| dist_sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// Clusters the standardized features (target excluded) for every `k` in
/// `k_range`, keeps the `k` with the highest silhouette (ties go to the
/// smaller `k`) and splits the rows into one environment per cluster.
/// Environments keep the original, unstandardized feature values.
pub fn build_environments(
    dataset: &TabularDataset,
    k_range: RangeInclusive<usize>,
    seed: u64,
) -> Result<(EnvironmentSet, ClusterAssignment)> {
    let n = dataset.n_rows();
    if *k_range.start() < 2 || *k_range.end() >= n || k_range.is_empty() {
        return Err(invalid(format!(
            "k range {}..={} must lie within [2, {n})",
            k_range.start(),
            k_range.end()
        )));
    }
    let single = EnvironmentSet::new(vec![dataset.clone()])?;
    let z = Standardizer::fit_guarded(&single).apply(dataset)?;

    let mut best: Option<ClusterAssignment> = None;
    for k in k_range {
        let fit = kmeans(z.features(), k, derive_seed(seed, k as u64), DEFAULT_RESTARTS)?;
        if best.as_ref().is_none_or(|b| fit.silhouette > b.silhouette) {
            best = Some(fit);
        }
    }
    let best = best.expect("non-empty range");
    let envs = partition_by_labels(dataset, &best.labels, best.k)?;
    Ok((envs, best))
}

/// One environment per label, in label order.
pub fn partition_by_labels(dataset: &TabularDataset, labels: &[usize], k: usize) -> Result<EnvironmentSet> {
    let mut rows: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        rows.get_mut(l)
            .ok_or_else(|| invalid(format!("label {l} outside [0, {k})")))?
            .push(i);
    }
    if rows.iter().any(Vec::is_empty) {
        return Err(Error::Clustering("empty cluster".into()));
    }
    EnvironmentSet::new(rows.iter().map(|r| dataset.select_rows(r)).collect())
}

/// Row counts per cluster as a compact string, e.g. `"120/98/77"`.
pub fn describe_sizes(assign: &ClusterAssignment) -> String {
    assign
        .cluster_sizes()
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join("/")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal;
    use ndarray::array;

    fn blobs(centers: &[(f64, f64)], per: usize, spread: f64, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = seeded(seed);
        let mut x = Array2::zeros((centers.len() * per, 2));
        let mut truth = Vec::new();
        for (c, &(cx, cy)) in centers.iter().enumerate() {
            for i in 0..per {
                let r = c * per + i;
                x[[r, 0]] = cx + spread * normal(&mut rng);
                x[[r, 1]] = cy + spread * normal(&mut rng);
                truth.push(c);
            }
        }
        (x, truth)
    }

    #[test]
    fn recovers_two_separated_clouds() {
        let (x, truth) = blobs(&[(0.0, 0.0), (50.0, 50.0)], 40, 1.0, 3);
        let fit = kmeans(x.view(), 2, 7, 5).unwrap();
        let first = fit.labels[0];
        for (l, t) in fit.labels.iter().zip(&truth) {
            assert_eq!(*l == first, *t == 0);
        }
        assert!(fit.silhouette > 0.9);
    }

    #[test]
    fn k_equals_n_gives_zero_wcss() {
        let x = array![[0.0, 0.0], [1.0, 0.0], [0.0, 3.0], [5.0, 5.0]];
        let fit = kmeans(x.view(), 4, 0, 3).unwrap();
        assert_eq!(fit.wcss(), 0.0);
        assert_eq!(fit.cluster_sizes(), vec![1, 1, 1, 1]);
    }

    #[test]
    fn wcss_never_increases() {
        let (x, _) = blobs(&[(0.0, 0.0), (3.0, 1.0), (1.0, 4.0)], 60, 1.5, 11);
        for seed in 0..10 {
            let fit = kmeans(x.view(), 4, seed, 1).unwrap();
            for w in fit.wcss_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-9, "{:?}", fit.wcss_history);
            }
        }
    }

    #[test]
    fn identical_rows_rejected() {
        let x = Array2::from_elem((10, 3), 2.0);
        assert!(matches!(kmeans(x.view(), 2, 0, 1), Err(Error::Clustering(_))));
        assert!(kmeans(x.view(), 1, 0, 1).is_err());
        assert!(kmeans(x.view(), 11, 0, 1).is_err());
    }

    #[test]
    fn four_point_silhouette() {
        let x = array![[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]];
        let s = silhouette_score(x.view(), &[0, 0, 1, 1]).unwrap();
        // a = 1, b = (10 + sqrt(101)) / 2 for every point
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        assert!((s - (1.0 - 1.0 / b)).abs() < 1e-12);
    }

    #[test]
    fn singleton_scores_zero_and_single_cluster_errors() {
        let x = array![[0.0], [1.0], [10.0]];
        let s = silhouette_score(x.view(), &[0, 0, 1]).unwrap();
        // points 0 and 1: a = 1, b = 10 and 9
        let expected = ((10.0 - 1.0) / 10.0 + (9.0 - 1.0) / 9.0) / 3.0;
        assert!((s - expected).abs() < 1e-12);
        assert!(silhouette_score(x.view(), &[0, 0, 0]).is_err());
    }

    #[test]
    fn environments_partition_rows() {
        let (x, _) = blobs(&[(0.0, 0.0), (20.0, 0.0), (0.0, 20.0)], 30, 1.0, 5);
        let y = x.column(0).to_owned();
        let data = TabularDataset::regression(x, y).unwrap();
        let (envs, fit) = build_environments(&data, 2..=6, 1).unwrap();
        assert_eq!(fit.k, 3);
        assert_eq!(envs.len(), 3);
        assert_eq!(envs.total_rows(), data.n_rows());
        let mut seen: Vec<f64> = envs.iter().flat_map(|e| e.target().to_vec()).collect();
        let mut orig = data.target().to_vec();
        seen.sort_by(f64::total_cmp);
        orig.sort_by(f64::total_cmp);
        assert_eq!(seen, orig);
        assert_eq!(describe_sizes(&fit), "30/30/30");
        assert!(build_environments(&data, 1..=3, 1).is_err());
    }

    #[test]
    fn deterministic() {
        let (x, _) = blobs(&[(0.0, 0.0), (4.0, 0.0)], 50, 1.5, 8);
        let a = kmeans(x.view(), 3, 42, 4).unwrap();
        let b = kmeans(x.view(), 3, 42, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn silhouette_in_range() {
        let (x, _) = blobs(&[(0.0, 0.0), (1.0, 1.0)], 30, 2.0, 2);
        let labels: Vec<usize> = (0..60).map(|i| i % 3).collect();
        let s = silhouette_score(x.view(), &labels).unwrap();
        assert!((-1.0..=1.0).contains(&s));
        let cols = x.len_of(ndarray::Axis(1));
        assert_eq!(cols, 2);
    }
}
