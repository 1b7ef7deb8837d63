//! Linear structural-equation benchmark with known causal structure.
//!
//! Per environment with parameter `e`:
//!
//! ```text
//! h      ~ N(0, e^2 I)                      (partially observed only)
//! x_cau  = e * z + c_x ⊙ h,   z ~ N(0, I)
//! y      = x_cau · w_causal + s * eps + h · c_y,  s = e (heteroskedastic) or 1
//! x_eff  = y * w_effect + N(0, I)
//! x_obs  = S [x_cau; x_eff]
//! ```
//!
//! `S` is the identity for unscrambled data and a seeded orthogonal matrix
//! otherwise. Coefficients are drawn once per trial and shared by all
//! environments.

use nalgebra::DMatrix;
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{default_feature_names, EnvironmentSet, TabularDataset, Task};
use crate::error::{invalid, Error, Result};
use crate::rng::{normal, seeded, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scrambling {
    Unscrambled,
    Scrambled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Observation {
    FullyObserved,
    PartiallyObserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Noise {
    Homoskedastic,
    Heteroskedastic,
}

/// One of the eight S/U x F/P x O/E benchmark cases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SemCase {
    pub observation: Observation,
    pub noise: Noise,
    pub scrambling: Scrambling,
}

impl SemCase {
    /// All eight cases in the conventional FOU, FOS, FEU, FES, POU, POS, PEU, PES order.
    pub fn all() -> Vec<SemCase> {
        let mut out = Vec::with_capacity(8);
        for observation in [Observation::FullyObserved, Observation::PartiallyObserved] {
            for noise in [Noise::Homoskedastic, Noise::Heteroskedastic] {
                for scrambling in [Scrambling::Unscrambled, Scrambling::Scrambled] {
                    out.push(SemCase {
                        observation,
                        noise,
                        scrambling,
                    });
                }
            }
        }
        out
    }

    /// Three-letter code such as `FEU` or `PES`.
    pub fn code(&self) -> String {
        let f = match self.observation {
            Observation::FullyObserved => 'F',
            Observation::PartiallyObserved => 'P',
        };
        let n = match self.noise {
            Noise::Homoskedastic => 'O',
            Noise::Heteroskedastic => 'E',
        };
        let s = match self.scrambling {
            Scrambling::Unscrambled => 'U',
            Scrambling::Scrambled => 'S',
        };
        format!("{f}{n}{s}")
    }

    pub fn parse(code: &str) -> Result<Self> {
        let c: Vec<char> = code.trim().to_ascii_uppercase().chars().collect();
        if c.len() != 3 {
            return Err(Error::Config(format!("bad SEM case code {code:?}")));
        }
        let observation = match c[0] {
            'F' => Observation::FullyObserved,
            'P' => Observation::PartiallyObserved,
            _ => return Err(Error::Config(format!("bad observation letter in {code:?}"))),
        };
        let noise = match c[1] {
            'O' => Noise::Homoskedastic,
            'E' => Noise::Heteroskedastic,
            _ => return Err(Error::Config(format!("bad noise letter in {code:?}"))),
        };
        let scrambling = match c[2] {
            'U' => Scrambling::Unscrambled,
            'S' => Scrambling::Scrambled,
            _ => return Err(Error::Config(format!("bad scrambling letter in {code:?}"))),
        };
        Ok(Self {
            observation,
            noise,
            scrambling,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SemConfig {
    pub scrambling: Scrambling,
    pub observation: Observation,
    pub noise: Noise,
    pub env_values: Vec<f64>,
    pub n_samples: usize,
    pub d_causal: usize,
    pub d_effect: usize,
    pub seed: u64,
}

impl Default for SemConfig {
    fn default() -> Self {
        Self {
            scrambling: Scrambling::Unscrambled,
            observation: Observation::FullyObserved,
            noise: Noise::Homoskedastic,
            env_values: vec![0.2, 2.0, 5.0],
            n_samples: 1000,
            d_causal: 5,
            d_effect: 5,
            seed: 0,
        }
    }
}

impl SemConfig {
    pub fn for_case(case: SemCase) -> Self {
        Self {
            scrambling: case.scrambling,
            observation: case.observation,
            noise: case.noise,
            ..Self::default()
        }
    }

    pub fn case(&self) -> SemCase {
        SemCase {
            observation: self.observation,
            noise: self.noise,
            scrambling: self.scrambling,
        }
    }

    pub fn dim(&self) -> usize {
        self.d_causal + self.d_effect
    }

    pub fn validate(&self) -> Result<()> {
        if self.env_values.is_empty() {
            return Err(Error::Config("env_values must not be empty".into()));
        }
        if let Some(e) = self.env_values.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
            return Err(Error::Config(format!("environment value {e} must be positive")));
        }
        if self.n_samples == 0 || self.d_causal == 0 || self.d_effect == 0 {
            return Err(Error::Config(
                "n_samples, d_causal and d_effect must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Coefficients that generated one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub w_causal: Array1<f64>,
    pub w_effect: Array1<f64>,
    /// Maps generative coordinates to observed ones: `x_obs = scramble · x_gen`.
    pub scramble: Array2<f64>,
    /// `(c_x, c_y)` for partially observed cases.
    pub confounder_coeffs: Option<(Array1<f64>, Array1<f64>)>,
}

impl GroundTruth {
    pub fn d_causal(&self) -> usize {
        self.w_causal.len()
    }

    /// Observed-basis weights expressed in the generative basis (`Sᵀ w`).
    pub fn to_generative(&self, w_obs: &Array1<f64>) -> Array1<f64> {
        self.scramble.t().dot(w_obs)
    }
}

fn normal_vec(rng: &mut Rng, n: usize) -> Array1<f64> {
    Array1::from_shape_simple_fn(n, || normal(rng))
}

fn normal_matrix(rng: &mut Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || normal(rng))
}

/// Orthogonal matrix from the QR factorization of a standard-normal matrix,
/// with column signs fixed so `R` has a positive diagonal.
pub fn random_orthogonal(rng: &mut Rng, d: usize) -> Array2<f64> {
    let a = normal_matrix(rng, d, d);
    let m = DMatrix::from_fn(d, d, |i, j| a[[i, j]]);
    let qr = m.qr();
    let q = qr.q();
    let r = qr.r();
    Array2::from_shape_fn((d, d), |(i, j)| {
        let sign = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        q[(i, j)] * sign
    })
}

pub fn generate_environments(config: &SemConfig) -> Result<(EnvironmentSet, GroundTruth)> {
    config.validate()?;
    let mut rng = seeded(config.seed);
    let dc = config.d_causal;
    let de = config.d_effect;
    let d = dc + de;

    let w_causal = normal_vec(&mut rng, dc);
    let w_effect = normal_vec(&mut rng, de);
    let confounder_coeffs = match config.observation {
        Observation::FullyObserved => None,
        Observation::PartiallyObserved => Some((normal_vec(&mut rng, dc), normal_vec(&mut rng, dc))),
    };
    let scramble = match config.scrambling {
        Scrambling::Unscrambled => Array2::eye(d),
        Scrambling::Scrambled => random_orthogonal(&mut rng, d),
    };
    let truth = GroundTruth {
        w_causal,
        w_effect,
        scramble,
        confounder_coeffs,
    };

    let names = default_feature_names(d);
    let mut envs = Vec::with_capacity(config.env_values.len());
    for &e in &config.env_values {
        let (x, y) = sample_environment(&mut rng, config, &truth, e);
        envs.push(TabularDataset::new(x, y, names.clone(), Task::Regression)?);
    }
    Ok((EnvironmentSet::new(envs)?, truth))
}

fn sample_environment(
    rng: &mut Rng,
    config: &SemConfig,
    truth: &GroundTruth,
    e: f64,
) -> (Array2<f64>, Array1<f64>) {
    let n = config.n_samples;
    let dc = config.d_causal;
    let de = config.d_effect;
    let noise_scale = match config.noise {
        Noise::Homoskedastic => 1.0,
        Noise::Heteroskedastic => e,
    };

    let mut x_cau = normal_matrix(rng, n, dc) * e;
    let eps = normal_vec(rng, n) * noise_scale;
    let hidden = truth
        .confounder_coeffs
        .as_ref()
        .map(|(cx, cy)| (normal_matrix(rng, n, dc) * e, cx, cy));
    let mut y = eps;
    if let Some((h, cx, cy)) = &hidden {
        x_cau = x_cau + h * *cx;
        y = y + h.dot(*cy);
    }
    y = y + x_cau.dot(&truth.w_causal);
    let y_col = y.view().insert_axis(Axis(1));
    let x_eff = &y_col * &truth.w_effect + normal_matrix(rng, n, de);

    let mut gen = Array2::zeros((n, dc + de));
    gen.slice_mut(ndarray::s![.., ..dc]).assign(&x_cau);
    gen.slice_mut(ndarray::s![.., dc..]).assign(&x_eff);
    // row form of x_obs = S x_gen
    let x_obs = gen.dot(&truth.scramble.t());
    (x_obs, y)
}

/// Two-feature illustration: `x1` causes `y` identically in every
/// environment, `x2` is an effect of `y` whose strength grows with `e`.
///
/// ```text
/// x1 ~ N(0, 1)
/// y  = x1 + 0.5 * N(0, e^2)
/// x2 = e * y + N(0, 1)
/// ```
pub fn generate_two_feature_demo(e_values: &[f64], n: usize, seed: u64) -> Result<EnvironmentSet> {
    if e_values.is_empty() {
        return Err(invalid("e_values must not be empty"));
    }
    if n == 0 {
        return Err(invalid("n must be positive"));
    }
    if let Some(e) = e_values.iter().find(|e| !(**e > 0.0 && e.is_finite())) {
        return Err(invalid(format!("environment value {e} must be positive")));
    }
    let mut rng = seeded(seed);
    let names = vec!["x1".to_string(), "x2".to_string()];
    let mut envs = Vec::with_capacity(e_values.len());
    for &e in e_values {
        let mut x = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let x1 = normal(&mut rng);
            let yi = x1 + 0.5 * e * normal(&mut rng);
            let x2 = e * yi + normal(&mut rng);
            x[[i, 0]] = x1;
            x[[i, 1]] = x2;
            y[i] = yi;
        }
        envs.push(TabularDataset::new(x, y, names.clone(), Task::Regression)?);
    }
    EnvironmentSet::new(envs)
}

/// True coefficient of `x1` in the two-feature demo.
pub const DEMO_CAUSAL_COEFFICIENT: f64 = 1.0;

/// Randomly permutes rows and cuts them into `b` near-equal batches; the
/// first `n % b` batches get one extra row. The last batch is the
/// validation pseudo-environment by convention.
pub fn split_into_batches(dataset: &TabularDataset, b: usize, seed: u64) -> Result<EnvironmentSet> {
    let n = dataset.n_rows();
    if b < 2 {
        return Err(invalid(format!("need at least two batches, got {b}")));
    }
    if b > n {
        return Err(invalid(format!("cannot split {n} rows into {b} batches")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed));
    let base = n / b;
    let extra = n % b;
    let mut start = 0;
    let mut batches = Vec::with_capacity(b);
    for i in 0..b {
        let len = base + usize::from(i < extra);
        batches.push(dataset.select_rows(&order[start..start + len]));
        start += len;
    }
    EnvironmentSet::new(batches)
}
