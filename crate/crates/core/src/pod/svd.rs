//! One-sided Jacobi SVD.
//!
//! Columns of the working matrix are rotated pairwise until every pair is
//! orthogonal to within a relative tolerance. The column norms are then the
//! singular values, the normalized columns are `U`, and the accumulated
//! rotations are `V`.

use super::PodError;
use crate::tensor::Tensor;

pub const MAX_SWEEPS: usize = 100;
pub const TOLERANCE: f64 = 1e-14;

/// Thin SVD `M = U diag(s) V^T` of an `m x n` matrix with `k = min(m, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Svd {
    /// `m x k`, orthonormal columns.
    pub u: Tensor,
    /// Decreasing, nonnegative, length `k`.
    pub s: Vec<f64>,
    /// `n x k`, orthonormal columns.
    pub v: Tensor,
}

impl Svd {
    /// `U_r diag(s_r) V_r^T` using the leading `r` triplets.
    pub fn reconstruct(&self, r: usize) -> Tensor {
        let (m, k) = (self.u.shape()[0], self.u.shape()[1]);
        let n = self.v.shape()[0];
        let r = r.min(k);
        let (u, v) = (self.u.data(), self.v.data());
        Tensor::from_fn(&[m, n], |idx| {
            let (i, j) = (idx / n, idx % n);
            (0..r).map(|c| u[i * k + c] * self.s[c] * v[j * k + c]).sum()
        })
    }
}

pub fn svd(m: &Tensor) -> Result<Svd, PodError> {
    if m.rank() != 2 {
        return Err(PodError::NotAMatrix(m.shape().to_vec()));
    }
    let (rows, cols) = (m.shape()[0], m.shape()[1]);
    if rows >= cols {
        let (u, s, v) = jacobi(m.data(), rows, cols)?;
        Ok(Svd { u, s, v })
    } else {
        let t = m.transpose().expect("rank 2");
        let (v, s, u) = jacobi(t.data(), cols, rows)?;
        Ok(Svd { u, s, v })
    }
}

/// Jacobi on a row-major `m x n` matrix with `m >= n`.
fn jacobi(a: &[f64], m: usize, n: usize) -> Result<(Tensor, Vec<f64>, Tensor), PodError> {
    // Column-contiguous copies of A and of V (initially the identity).
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| (0..m).map(|i| a[i * n + j]).collect()).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let fro2: f64 = a.iter().map(|x| x * x).sum();
    let floor = 1e-300_f64.max(fro2 * 1e-32);

    let mut converged = n < 2;
    let mut worst = 0.0;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        worst = 0.0;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += cp[i] * cp[i];
                        be += cq[i] * cq[i];
                        ga += cp[i] * cq[i];
                    }
                    (al, be, ga)
                };
                let scale = (alpha * beta).sqrt();
                if gamma.abs() <= floor || gamma.abs() <= TOLERANCE * scale {
                    continue;
                }
                worst = f64::max(worst, gamma.abs() / scale);
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(PodError::NoConvergence {
            sweeps: MAX_SWEEPS,
            residual: worst,
        });
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]).then(i.cmp(&j)));

    let smax = norms.iter().copied().fold(0.0, f64::max);
    let mut s = Vec::with_capacity(n);
    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut vsorted: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut pending = Vec::new();
    for &j in &order {
        let sigma = norms[j];
        if sigma > smax * 1e-8 {
            s.push(sigma);
            ucols.push(cols[j].iter().map(|x| x / sigma).collect());
        } else if let Some(col) = (sigma > smax * 1e-15).then(|| reorthogonalize(&cols[j], sigma, &ucols)).flatten() {
            // Rounding dominates tiny columns; projecting out the leading
            // directions restores orthogonality at a cost of order sigma.
            s.push(sigma);
            ucols.push(col);
        } else {
            s.push(0.0);
            pending.push(ucols.len());
            ucols.push(Vec::new());
        }
        vsorted.push(vcols[j].clone());
    }
    complete_basis(&mut ucols, &pending, m);

    for k in 0..n {
        fix_sign(&mut ucols[k], &mut vsorted[k]);
    }
    let u = Tensor::from_fn(&[m, n], |idx| ucols[idx % n][idx / n]);
    let v = Tensor::from_fn(&[n, n], |idx| vsorted[idx % n][idx / n]);
    Ok((u, s, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let (xp, yq) = (*x, *y);
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

/// `col / sigma` with the span of `prev` removed twice, or `None` when
/// little of it survives.
fn reorthogonalize(col: &[f64], sigma: f64, prev: &[Vec<f64>]) -> Option<Vec<f64>> {
    let mut v: Vec<f64> = col.iter().map(|x| x / sigma).collect();
    for _ in 0..2 {
        for p in prev.iter().filter(|p| !p.is_empty()) {
            let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(p) {
                *a -= dot * b;
            }
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.5).then(|| v.into_iter().map(|x| x / norm).collect())
}

/// Fills the empty columns listed in `pending` with unit vectors orthogonal
/// to every other column (Gram-Schmidt over the standard basis).
fn complete_basis(ucols: &mut [Vec<f64>], pending: &[usize], m: usize) {
    let mut candidate = 0;
    for &slot in pending {
        loop {
            assert!(candidate < m, "standard basis exhausted");
            let mut v = vec![0.0; m];
            v[candidate] = 1.0;
            candidate += 1;
            for _ in 0..2 {
                for (k, col) in ucols.iter().enumerate() {
                    if k == slot || col.is_empty() {
                        continue;
                    }
                    let dot: f64 = v.iter().zip(col).map(|(a, b)| a * b).sum();
                    for (a, b) in v.iter_mut().zip(col) {
                        *a -= dot * b;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                ucols[slot] = v.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Makes the largest-magnitude entry of `u` positive, flipping `v` with it.
fn fix_sign(u: &mut [f64], v: &mut [f64]) {
    let pivot = u
        .iter()
        .copied()
        .fold(0.0f64, |best, x| if x.abs() > best.abs() + 1e-12 { x } else { best });
    if pivot < 0.0 {
        u.iter_mut().for_each(|x| *x = -*x);
        v.iter_mut().for_each(|x| *x = -*x);
    }
}
