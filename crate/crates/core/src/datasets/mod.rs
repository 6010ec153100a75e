//! Synthetic sequence datasets and the SEQD file format.
//!
//! Samples are stored time-major: `x` is `(tau, d)` and `y` is `(tau, d_out)`.

mod io;

pub use io::{export_csv, load_dataset, save_dataset};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::target::{TargetError, TargetSpec};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("not a SEQD file (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported SEQD version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("{0} unexpected bytes after the last sample")]
    TrailingBytes(usize),
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("permutation of length {perm} applied to sequences of length {tau}")]
    LengthMismatch { perm: usize, tau: usize },
    #[error("all particles coincide")]
    Degenerate,
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Exponential,
    Random,
}

/// Convolution kernel `rho(0..tau)` of a linear-functional dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvolutionFilter {
    pub kind: FilterKind,
    pub rho: Vec<f64>,
}

impl ConvolutionFilter {
    pub fn exponential(tau: usize) -> Self {
        Self {
            kind: FilterKind::Exponential,
            rho: (0..tau).map(|s| (-(s as f64)).exp()).collect(),
        }
    }

    pub fn random(tau: usize, rng: &mut impl Rng) -> Self {
        Self {
            kind: FilterKind::Random,
            rho: (0..tau).map(|_| rng.gen::<f64>()).collect(),
        }
    }

    /// Causal convolution `y(t) = sum_{s<=t} rho(s) x(t-s)`.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..x.len())
            .map(|t| (0..=t).map(|s| self.rho[s] * x[t - s]).sum())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tau: usize,
    pub d: usize,
    pub d_out: usize,
    pub filter: Option<ConvolutionFilter>,
    /// `count * tau * d` values.
    pub x: Vec<f64>,
    /// `count * tau * d_out` values.
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn empty(tau: usize, d: usize, d_out: usize) -> Self {
        Self {
            tau,
            d,
            d_out,
            filter: None,
            x: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn count(&self) -> usize {
        if self.tau * self.d == 0 {
            0
        } else {
            self.x.len() / (self.tau * self.d)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 || self.d == 0 || self.d_out == 0 {
            return Err(DataError::Invalid("tau, d and d_out must be positive".into()));
        }
        let n = self.count();
        if self.x.len() != n * self.tau * self.d || self.y.len() != n * self.tau * self.d_out {
            return Err(DataError::Invalid("buffer lengths disagree with header".into()));
        }
        if let Some(f) = &self.filter {
            if f.rho.len() != self.tau {
                return Err(DataError::Invalid("filter length differs from tau".into()));
            }
        }
        if self.x.iter().chain(&self.y).any(|v| !v.is_finite()) {
            return Err(DataError::Invalid("non-finite value".into()));
        }
        Ok(())
    }

    pub fn x_of(&self, i: usize) -> &[f64] {
        let w = self.tau * self.d;
        &self.x[i * w..(i + 1) * w]
    }

    pub fn y_of(&self, i: usize) -> &[f64] {
        let w = self.tau * self.d_out;
        &self.y[i * w..(i + 1) * w]
    }

    /// Input of one sample as a `(tau, d)` tensor.
    pub fn x_tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(vec![self.tau, self.d], self.x_of(i).to_vec())
    }

    pub fn y_tensor(&self, i: usize) -> Tensor {
        Tensor::from_parts(vec![self.tau, self.d_out], self.y_of(i).to_vec())
    }

    /// Inputs of the listed samples as `(batch, tau, d)`.
    pub fn x_batch(&self, idx: &[usize]) -> Tensor {
        let data = idx.iter().flat_map(|&i| self.x_of(i).iter().copied()).collect();
        Tensor::from_parts(vec![idx.len(), self.tau, self.d], data)
    }

    pub fn y_batch(&self, idx: &[usize]) -> Tensor {
        let data = idx.iter().flat_map(|&i| self.y_of(i).iter().copied()).collect();
        Tensor::from_parts(vec![idx.len(), self.tau, self.d_out], data)
    }

    /// Samples `range` as a new dataset with the same header.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Dataset {
        let (wx, wy) = (self.tau * self.d, self.tau * self.d_out);
        Dataset {
            x: self.x[range.start * wx..range.end * wx].to_vec(),
            y: self.y[range.start * wy..range.end * wy].to_vec(),
            filter: self.filter.clone(),
            ..*self
        }
    }

    /// Variance of all target values, the MSE of the best constant.
    pub fn target_variance(&self) -> f64 {
        let n = self.y.len() as f64;
        let mean = self.y.iter().sum::<f64>() / n;
        self.y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
    }
}

/// Bijection on `0..tau`; applying it maps `x` to `x'(i) = x(p[i])`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(p: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; p.len()];
        for &i in &p {
            if i >= p.len() || std::mem::replace(&mut seen[i], true) {
                return Err(DataError::Invalid(format!("{p:?} is not a permutation")));
            }
        }
        Ok(Self(p))
    }

    pub fn identity(tau: usize) -> Self {
        Self((0..tau).collect())
    }

    /// Moves the first `k` elements to the end.
    pub fn rotate_left(tau: usize, k: usize) -> Self {
        Self((0..tau).map(|i| (i + k) % tau).collect())
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Self(inv)
    }

    pub fn indices(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Permutes the rows of a time-major `(tau, w)` buffer.
    pub fn apply_rows(&self, rows: &[f64], width: usize) -> Vec<f64> {
        self.0
            .iter()
            .flat_map(|&src| rows[src * width..(src + 1) * width].iter().copied())
            .collect()
    }
}

/// Replaces every input sequence by its permuted version; targets are kept.
pub fn apply_permutation(data: &Dataset, p: &Permutation) -> Result<Dataset> {
    if p.len() != data.tau {
        return Err(DataError::LengthMismatch {
            perm: p.len(),
            tau: data.tau,
        });
    }
    let x = (0..data.count())
        .flat_map(|i| p.apply_rows(data.x_of(i), data.d))
        .collect();
    Ok(Dataset {
        x,
        y: data.y.clone(),
        filter: data.filter.clone(),
        ..*data
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GravityConfig {
    pub tau: usize,
    pub count: usize,
    pub seed: u64,
    /// Lower clamp on pairwise distances.
    pub eps: f64,
    /// Sum only over `s < t`.
    pub causal: bool,
}

impl Default for GravityConfig {
    fn default() -> Self {
        Self {
            tau: 5,
            count: 10_000,
            seed: 0,
            eps: 0.05,
            causal: false,
        }
    }
}

/// Acceleration of every particle in a `(tau, 3)` sample of
/// `(x, y, mass)` rows, with unit gravitational constant.
pub fn gravity_accelerations(x: &[f64], tau: usize, eps: f64, causal: bool) -> Vec<f64> {
    let mut y = vec![0.0; tau * 2];
    for t in 0..tau {
        let (xt, yt) = (x[t * 3], x[t * 3 + 1]);
        for s in 0..tau {
            if s == t || (causal && s > t) {
                continue;
            }
            let (dx, dy) = (x[s * 3] - xt, x[s * 3 + 1] - yt);
            let dist = (dx * dx + dy * dy).sqrt();
            if dist == 0.0 {
                continue;
            }
            let r = dist.max(eps);
            let k = x[s * 3 + 2] / (r * r * dist);
            y[t * 2] += k * dx;
            y[t * 2 + 1] += k * dy;
        }
    }
    y
}

pub fn gen_gravity(cfg: &GravityConfig) -> Result<Dataset> {
    if cfg.tau < 2 {
        return Err(DataError::Invalid("gravity needs at least two particles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut data = Dataset::empty(cfg.tau, 3, 2);
    for _ in 0..cfg.count {
        let sample: Vec<f64> = (0..cfg.tau)
            .flat_map(|_| {
                let px: f64 = rng.gen();
                let py: f64 = rng.gen();
                let m: f64 = rng.gen_range(0.1..1.0);
                [px, py, m]
            })
            .collect();
        data.y
            .extend(gravity_accelerations(&sample, cfg.tau, cfg.eps, cfg.causal));
        data.x.extend(sample);
    }
    Ok(data)
}

/// Row-normalized inverse-square weights `M(s) / max(dist, eps)^2` with a
/// zero diagonal, for one `(tau, 3)` sample.
pub fn gravity_graph(x: &[f64], tau: usize, eps: f64) -> Result<Tensor> {
    if tau < 2 || x.len() != tau * 3 {
        return Err(DataError::Invalid("gravity graph needs a (tau >= 2, 3) sample".into()));
    }
    let mut g = vec![0.0; tau * tau];
    for t in 0..tau {
        let mut total = 0.0;
        for s in 0..tau {
            if s == t {
                continue;
            }
            let (dx, dy) = (x[s * 3] - x[t * 3], x[s * 3 + 1] - x[t * 3 + 1]);
            let r = (dx * dx + dy * dy).sqrt().max(eps);
            let w = x[s * 3 + 2] / (r * r);
            g[t * tau + s] = w;
            total += w;
        }
        if !(total > 0.0 && total.is_finite()) {
            return Err(DataError::Degenerate);
        }
        for v in &mut g[t * tau..(t + 1) * tau] {
            *v /= total;
        }
    }
    Ok(Tensor::from_parts(vec![tau, tau], g))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinearFunctionalConfig {
    pub kind: FilterKind,
    pub tau: usize,
    pub count: usize,
    pub seed: u64,
}

impl Default for LinearFunctionalConfig {
    fn default() -> Self {
        Self {
            kind: FilterKind::Exponential,
            tau: 32,
            count: 10_000,
            seed: 0,
        }
    }
}

/// Scalar `U[0, 1]` inputs and their causal convolution. A random filter is
/// drawn first from the dataset seed.
pub fn gen_linear_functional(cfg: &LinearFunctionalConfig) -> Result<Dataset> {
    if cfg.tau == 0 {
        return Err(DataError::Invalid("tau must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let filter = match cfg.kind {
        FilterKind::Exponential => ConvolutionFilter::exponential(cfg.tau),
        FilterKind::Random => ConvolutionFilter::random(cfg.tau, &mut rng),
    };
    gen_with_filter(filter, cfg.tau, cfg.count, &mut rng)
}

/// Convolution dataset for a given filter, drawing inputs from `rng`.
pub fn gen_with_filter(filter: ConvolutionFilter, tau: usize, count: usize, rng: &mut impl Rng) -> Result<Dataset> {
    if filter.rho.len() != tau {
        return Err(DataError::Invalid("filter length differs from tau".into()));
    }
    let mut data = Dataset::empty(tau, 1, 1);
    for _ in 0..count {
        let x: Vec<f64> = (0..tau).map(|_| rng.gen()).collect();
        data.y.extend(filter.apply(&x));
        data.x.extend(x);
    }
    data.filter = Some(filter);
    Ok(data)
}

/// Uniform inputs on `[0, 1]^{tau x d}` labelled by the target.
pub fn gen_target_form_dataset(spec: &TargetSpec, count: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Dataset::empty(spec.tau, spec.d, 1);
    for _ in 0..count {
        let x: Vec<f64> = (0..spec.tau * spec.d).map(|_| rng.gen()).collect();
        let xt = Tensor::from_parts(vec![spec.tau, spec.d], x);
        data.y.extend(spec.eval(&xt)?);
        data.x.extend(xt.into_data());
    }
    Ok(data)
}
