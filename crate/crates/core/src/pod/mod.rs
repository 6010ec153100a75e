//! Proper orthogonal decomposition of bivariate functions on quadrature
//! grids.
//!
//! With grid weights `w`, the discrete `L^2` inner product is
//! `<f, g>_w = sum_i w_i f(u_i) g(u_i)`. The decomposition takes the SVD of
//! `W^{1/2} G W^{1/2}` (where `G_ij = G(u_i, v_j)`) and divides the singular
//! vectors by `sqrt(w)`, which gives `phi_k`, `psi_k` orthonormal under
//! `<., .>_w` and `G = sum_k sigma_k phi_k psi_k^T` on the grid.

mod svd;

pub use svd::{svd, Svd, MAX_SWEEPS, TOLERANCE};

use std::path::Path;

use thiserror::Error;

use crate::envelope::{EnvelopeError, Reader, Writer};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum PodError {
    #[error("expected a matrix, got shape {0:?}")]
    NotAMatrix(Vec<usize>),
    #[error("svd did not converge after {sweeps} sweeps (largest relative off-diagonal {residual:e})")]
    NoConvergence { sweeps: usize, residual: f64 },
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("kernel value at ({u}, {v}) is not finite")]
    NonFinite { u: f64, v: f64 },
    #[error("need at least 3 nonzero singular values, got {0}")]
    TooFewValues(usize),
    #[error("spectrum file: {0}")]
    Envelope(#[from] EnvelopeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, PodError>;

/// Quadrature nodes and weights on an interval.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadratureGrid {
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureGrid {
    /// Composite midpoint rule with `n` cells on `[a, b]`.
    pub fn midpoint(n: usize, a: f64, b: f64) -> Result<Self> {
        if n < 2 {
            return Err(PodError::Grid(format!("need at least 2 points, got {n}")));
        }
        if !(a.is_finite() && b.is_finite() && b > a) {
            return Err(PodError::Grid(format!("bad interval [{a}, {b}]")));
        }
        let h = (b - a) / n as f64;
        Ok(Self {
            points: (0..n).map(|i| a + (i as f64 + 0.5) * h).collect(),
            weights: vec![h; n],
        })
    }

    /// Midpoint grid on `[0, 1]`.
    pub fn unit(n: usize) -> Result<Self> {
        Self::midpoint(n, 0.0, 1.0)
    }

    pub fn new(points: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if points.len() != weights.len() || points.len() < 2 {
            return Err(PodError::Grid("points and weights must match, N >= 2".into()));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(PodError::Grid("points must be strictly increasing".into()));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(PodError::Grid("weights must be positive".into()));
        }
        Ok(Self { points, weights })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn inner(&self, f: &[f64], g: &[f64]) -> f64 {
        self.weights.iter().zip(f).zip(g).map(|((w, a), b)| w * a * b).sum()
    }
}

/// `G(u, v) = sum_k sigma_k phi_k(u) psi_k(v)` sampled on a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFactorization {
    pub sigma: Vec<f64>,
    /// `(K, N)`: row `k` holds `phi_k` at the grid points.
    pub left: Tensor,
    /// `(K, N)`: row `k` holds `psi_k`.
    pub right: Tensor,
    pub grid: QuadratureGrid,
}

impl SpectralFactorization {
    pub fn rank_bound(&self) -> usize {
        self.sigma.len()
    }

    /// Samples of the rank-`r` truncation, `(N, N)`.
    pub fn reconstruct(&self, r: usize) -> Tensor {
        let n = self.grid.len();
        let r = r.min(self.sigma.len());
        let (l, rt) = (self.left.data(), self.right.data());
        let mut out = vec![0.0; n * n];
        for k in 0..r {
            let s = self.sigma[k];
            if s == 0.0 {
                continue;
            }
            let (phi, psi) = (&l[k * n..(k + 1) * n], &rt[k * n..(k + 1) * n]);
            for i in 0..n {
                let a = s * phi[i];
                for (o, p) in out[i * n..(i + 1) * n].iter_mut().zip(psi) {
                    *o += a * p;
                }
            }
        }
        Tensor::from_parts(vec![n, n], out)
    }

    /// Largest deviation from `<phi_i, phi_j>_w = delta_ij` over both bases.
    pub fn orthonormality_error(&self) -> f64 {
        let n = self.grid.len();
        let k = self.sigma.len();
        let mut worst: f64 = 0.0;
        for basis in [&self.left, &self.right] {
            let d = basis.data();
            for i in 0..k {
                for j in i..k {
                    let ip = self.grid.inner(&d[i * n..(i + 1) * n], &d[j * n..(j + 1) * n]);
                    let want = if i == j { 1.0 } else { 0.0 };
                    worst = worst.max((ip - want).abs());
                }
            }
        }
        worst
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::with_header(b"SPEC");
        w.u64(self.grid.len() as u64);
        w.f64s(self.grid.points());
        w.f64s(self.grid.weights());
        w.u64(self.sigma.len() as u64);
        w.f64s(&self.sigma);
        w.f64s(self.left.data());
        w.f64s(self.right.data());
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::with_header(bytes, b"SPEC")?;
        let n = r.usize()?;
        let points = r.f64s(n)?;
        let weights = r.f64s(n)?;
        let grid = QuadratureGrid::new(points, weights)?;
        let k = r.usize()?;
        let sigma = r.f64s(k)?;
        let kn = k
            .checked_mul(n)
            .ok_or_else(|| EnvelopeError::Invalid("size overflow".into()))?;
        let invalid = |e: crate::tensor::TensorError| EnvelopeError::Invalid(e.to_string());
        let left = Tensor::new(vec![k, n], r.f64s(kn)?).map_err(invalid)?;
        let right = Tensor::new(vec![k, n], r.f64s(kn)?).map_err(invalid)?;
        r.expect_end()?;
        Ok(Self {
            sigma,
            left,
            right,
            grid,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// POD of a kernel given as a function.
pub fn pod(g: impl Fn(f64, f64) -> f64, grid: &QuadratureGrid) -> Result<SpectralFactorization> {
    let pts = grid.points();
    let n = pts.len();
    let mut samples = Vec::with_capacity(n * n);
    for &u in pts {
        for &v in pts {
            let val = g(u, v);
            if !val.is_finite() {
                return Err(PodError::NonFinite { u, v });
            }
            samples.push(val);
        }
    }
    pod_samples(&Tensor::from_parts(vec![n, n], samples), grid)
}

/// POD of kernel samples `G_ij = G(u_i, v_j)` on `grid x grid`.
pub fn pod_samples(samples: &Tensor, grid: &QuadratureGrid) -> Result<SpectralFactorization> {
    let n = grid.len();
    if samples.shape() != [n, n] {
        return Err(PodError::Grid(format!(
            "samples {:?} do not match grid size {n}",
            samples.shape()
        )));
    }
    let sw: Vec<f64> = grid.weights().iter().map(|w| w.sqrt()).collect();
    let d = samples.data();
    let scaled = Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        sw[i] * d[idx] * sw[j]
    });
    let dec = svd(&scaled)?;
    let u = dec.u.data();
    let v = dec.v.data();
    let left = Tensor::from_fn(&[n, n], |idx| {
        let (k, i) = (idx / n, idx % n);
        u[i * n + k] / sw[i]
    });
    let right = Tensor::from_fn(&[n, n], |idx| {
        let (k, j) = (idx / n, idx % n);
        v[j * n + k] / sw[j]
    });
    Ok(SpectralFactorization {
        sigma: dec.s,
        left,
        right,
        grid: grid.clone(),
    })
}

/// `sqrt(sum_{k > r} sigma_k^2)`: the optimal rank-`r` error.
pub fn truncation_error(fact: &SpectralFactorization, r: usize) -> f64 {
    tail_norm(&fact.sigma, r)
}

pub fn tail_norm(sigma: &[f64], r: usize) -> f64 {
    sigma.iter().skip(r).map(|s| s * s).sum::<f64>().sqrt()
}

/// Weighted `L^2` distance between two kernels sampled on `grid x grid`.
pub fn weighted_l2(a: &Tensor, b: &Tensor, grid: &QuadratureGrid) -> f64 {
    let n = grid.len();
    let w = grid.weights();
    a.data()
        .iter()
        .zip(b.data())
        .enumerate()
        .map(|(idx, (x, y))| w[idx / n] * w[idx % n] * (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Power-law fit `sigma_k <= c k^{-alpha}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecayFit {
    pub c: f64,
    pub alpha: f64,
    /// Root-mean-square residual of the log-log regression.
    pub residual: f64,
}

/// Fits `alpha` by least squares on `log sigma_k` against `log k` over the
/// nonzero values (those above `1e-12` of the largest), then takes the
/// smallest `c` for which the bound holds on the data.
pub fn fit_decay_exponent(sigma: &[f64]) -> Result<DecayFit> {
    let smax = sigma.iter().copied().fold(0.0, f64::max);
    let pts: Vec<(f64, f64)> = sigma
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > smax * 1e-12 && s > 0.0)
        .map(|(i, &s)| (((i + 1) as f64).ln(), s.ln()))
        .collect();
    if pts.len() < 3 {
        return Err(PodError::TooFewValues(pts.len()));
    }
    let (slope, intercept) = least_squares(&pts);
    let alpha = -slope;
    let residual = (pts
        .iter()
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum::<f64>()
        / pts.len() as f64)
        .sqrt();
    let c = pts
        .iter()
        .map(|(x, y)| (y + alpha * x).exp())
        .fold(0.0, f64::max);
    Ok(DecayFit { c, alpha, residual })
}

/// Ordinary least squares `y = intercept + slope x`.
pub fn least_squares(pts: &[(f64, f64)]) -> (f64, f64) {
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| (x - mx) * (x - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}
