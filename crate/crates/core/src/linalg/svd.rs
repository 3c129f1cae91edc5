//! One-sided Jacobi SVD.
//!
//! Rotations are applied to column pairs of the taller orientation until
//! every pair is orthogonal to within `TOLERANCE` relative to the column
//! norms. At the sizes used here (a few hundred rows at most) this is both
//! accurate to working precision and fast enough.

use super::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const TOLERANCE: f64 = 1e-12;

/// Thin singular value decomposition `a = u · diag(sigma) · vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// `m × p`, orthonormal columns.
    pub u: Matrix,
    /// Non-increasing, non-negative; length `p = min(m, n)`.
    pub sigma: Vec<f64>,
    /// `n × p`, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        let p = self.sigma.len();
        let mut us = self.u.clone();
        for i in 0..us.rows() {
            for (j, s) in self.sigma.iter().enumerate().take(p) {
                let x = us.get(i, j) * s;
                us.set(i, j, x);
            }
        }
        us.matmul_t(&self.v).expect("consistent svd shapes")
    }

    /// `√(Σ_{i ≥ r} σᵢ²)`: the Frobenius error of the best rank-`r` approximation.
    pub fn tail_norm(&self, r: usize) -> f64 {
        self.sigma[r.min(self.sigma.len())..]
            .iter()
            .map(|s| s * s)
            .sum::<f64>()
            .sqrt()
    }
}

pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd input".into()));
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose())?;
        let mut out = SvdResult {
            u: t.v,
            sigma: t.sigma,
            v: t.u,
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Column-major working copies: g holds the rotated columns of a, w
    // accumulates the right rotations.
    let mut g: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut w: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n == 1;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for i in 0..n - 1 {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let (gi, gj) = (&g[i], &g[j]);
                    let mut alpha = 0.0;
                    let mut beta = 0.0;
                    let mut gamma = 0.0;
                    for k in 0..m {
                        alpha += gi[k] * gi[k];
                        beta += gj[k] * gj[k];
                        gamma += gi[k] * gj[k];
                    }
                    (alpha, beta, gamma)
                };
                if gamma == 0.0 || gamma.abs() <= TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut g, i, j, c, s);
                rotate(&mut w, i, j, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            what: "one-sided Jacobi SVD",
            iterations: MAX_SWEEPS,
        });
    }

    let norms: Vec<f64> = g.iter().map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v = Matrix::zeros(n, n);
    let mut pending_zero = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        let s = norms[src];
        sigma.push(s);
        for (k, &x) in w[src].iter().enumerate() {
            v.set(k, dst, x);
        }
        if s > 0.0 {
            u_cols.push(g[src].iter().map(|x| x / s).collect());
        } else {
            u_cols.push(vec![0.0; m]);
            pending_zero.push(dst);
        }
    }
    complete_basis(&mut u_cols, &pending_zero, m);

    let mut u = Matrix::zeros(m, n);
    for (j, col) in u_cols.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            u.set(i, j, x);
        }
    }
    let mut out = SvdResult { u, sigma, v };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate(cols: &mut [Vec<f64>], i: usize, j: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(j);
    let (ci, cj) = (&mut left[i], &mut right[0]);
    for (x, y) in ci.iter_mut().zip(cj.iter_mut()) {
        let (xi, yj) = (*x, *y);
        *x = c * xi - s * yj;
        *y = s * xi + c * yj;
    }
}

/// Fills columns with zero singular value by Gram–Schmidt over the
/// standard basis so that `u` keeps orthonormal columns.
fn complete_basis(cols: &mut [Vec<f64>], zero: &[usize], m: usize) {
    let mut next_basis = 0;
    for &z in zero {
        loop {
            assert!(next_basis < m, "basis completion exhausted");
            let mut cand = vec![0.0; m];
            cand[next_basis] = 1.0;
            next_basis += 1;
            for _ in 0..2 {
                for (k, col) in cols.iter().enumerate() {
                    if k == z {
                        continue;
                    }
                    let dot: f64 = col.iter().zip(&cand).map(|(a, b)| a * b).sum();
                    for (c, a) in cand.iter_mut().zip(col) {
                        *c -= dot * a;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                cols[z] = cand.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
}

/// Flips column pairs so the largest-magnitude entry of every `u` column is
/// non-negative.
fn fix_signs(s: &mut SvdResult) {
    let (m, p) = s.u.shape();
    let n = s.v.rows();
    for j in 0..p {
        let mut best = 0;
        for i in 1..m {
            if s.u.get(i, j).abs() > s.u.get(best, j).abs() {
                best = i;
            }
        }
        if s.u.get(best, j) < 0.0 {
            for i in 0..m {
                let x = s.u.get(i, j);
                s.u.set(i, j, -x);
            }
            for i in 0..n {
                let x = s.v.get(i, j);
                s.v.set(i, j, -x);
            }
        }
    }
}

/// Splits the leading `r` singular triplets into balanced factors
/// `U_r = u[:, :r]·diag(√σ)`, `V_r = v[:, :r]·diag(√σ)`, so `U_r·V_rᵀ` is the
/// best rank-`r` approximation.
pub fn truncate(s: &SvdResult, r: usize) -> Result<(Matrix, Matrix)> {
    let p = s.sigma.len();
    if r == 0 || r > p {
        return Err(Error::Argument(format!("truncation rank {r} outside 1..={p}")));
    }
    let scale: Vec<f64> = s.sigma[..r].iter().map(|x| x.sqrt()).collect();
    let take = |m: &Matrix| {
        let mut out = m.leading_columns(r);
        for i in 0..out.rows() {
            for (x, sc) in out.row_mut(i).iter_mut().zip(&scale) {
                *x *= sc;
            }
        }
        out
    };
    Ok((take(&s.u), take(&s.v)))
}
