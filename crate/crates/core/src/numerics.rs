//! Shared dense linear algebra: SVD, singular-value thresholding, LASSO
//! coordinate descent, masked RMSE.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

use crate::mat::Mat;
use crate::{Error, Result};

/// Thin SVD `A = U diag(s) V^T`.
///
/// Singular values are sorted descending; factor columns are orthonormal;
/// the sign of each column pair is fixed by forcing the largest-magnitude
/// entry of the left vector non-negative, so results are reproducible.
#[derive(Clone, Debug)]
pub struct SvdFactors {
    /// Left singular vectors, `p × r`.
    pub u: Mat,
    /// Singular values, length `r`, descending and non-negative.
    pub s: Vec<f64>,
    /// Right singular vectors, `q × r`.
    pub v: Mat,
}

impl SvdFactors {
    /// `U diag(s) V^T`.
    pub fn reconstruct(&self) -> Mat {
        reconstruct(&self.u, &self.s, &self.v)
    }

    /// Reconstruction keeping only the leading `rank` singular values.
    pub fn reconstruct_truncated(&self, rank: usize) -> Mat {
        let rank = rank.min(self.s.len());
        let mut s = self.s.clone();
        for value in s.iter_mut().skip(rank) {
            *value = 0.0;
        }
        reconstruct(&self.u, &s, &self.v)
    }
}

fn reconstruct(u: &Mat, s: &[f64], v: &Mat) -> Mat {
    let mut scaled = u.clone();
    for i in 0..scaled.rows() {
        let row = scaled.row_mut(i);
        for (x, &sv) in row.iter_mut().zip(s) {
            *x *= sv;
        }
    }
    scaled.matmul_tb(v)
}

/// Thin SVD by one-sided Jacobi rotations. Deterministic and dependency-free;
/// accurate at the dense sizes used here (tens to a few hundred).
pub fn svd(matrix: &Mat) -> Result<SvdFactors> {
    if !matrix.all_finite() {
        return Err(Error::Invalid("svd: input has non-finite entries".into()));
    }
    if matrix.rows() == 0 || matrix.cols() == 0 {
        return Err(Error::Invalid("svd: empty matrix".into()));
    }
    if matrix.rows() >= matrix.cols() {
        one_sided_jacobi(matrix)
    } else {
        let factors = one_sided_jacobi(&matrix.transpose())?;
        Ok(fix_signs(SvdFactors { u: factors.v, s: factors.s, v: factors.u }))
    }
}

/// One-sided Jacobi on `m` with `rows >= cols`: orthogonalizes the columns
/// of `m`, which are kept as contiguous rows of the transposed work matrix.
fn one_sided_jacobi(m: &Mat) -> Result<SvdFactors> {
    const TOL: f64 = 1e-13;
    const MAX_SWEEPS: usize = 64;

    let p = m.rows();
    let q = m.cols();
    let mut work = m.transpose(); // q×p, row j = column j of m
    let mut vt = Mat::identity(q); // row j = column j of V

    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for i in 0..q {
            for j in (i + 1)..q {
                let (mut a, mut b, mut c) = (0.0, 0.0, 0.0);
                {
                    let ri = work.row(i);
                    let rj = work.row(j);
                    for (&x, &y) in ri.iter().zip(rj) {
                        a += x * x;
                        b += y * y;
                        c += x * y;
                    }
                }
                if c.abs() <= TOL * (a * b).sqrt() || a == 0.0 || b == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (b - a) / (2.0 * c);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cos = 1.0 / (1.0 + t * t).sqrt();
                let sin = cos * t;
                rotate_rows(&mut work, i, j, cos, sin);
                rotate_rows(&mut vt, i, j, cos, sin);
            }
        }
        if !rotated {
            break;
        }
    }

    // Column norms are the singular values; order descending.
    let mut order: Vec<usize> = (0..q).collect();
    let norms: Vec<f64> = (0..q).map(|j| work.row(j).iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap().then(x.cmp(&y)));

    let mut u = Mat::zeros(p, q);
    let mut v = Mat::zeros(q, q);
    let mut s = vec![0.0; q];
    let scale = norms.iter().fold(0.0, |m: f64, &n| m.max(n));
    let negligible = scale * 1e-14;
    let mut deficient = Vec::new();
    for (col, &src) in order.iter().enumerate() {
        s[col] = norms[src];
        for r in 0..q {
            v[(r, col)] = vt[(src, r)];
        }
        if norms[src] > negligible {
            let inv = 1.0 / norms[src];
            let wrow = work.row(src);
            for r in 0..p {
                u[(r, col)] = wrow[r] * inv;
            }
        } else {
            s[col] = norms[src]; // kept as the (tiny) true norm
            deficient.push(col);
        }
    }
    complete_orthonormal(&mut u, &deficient);
    Ok(fix_signs(SvdFactors { u, s, v }))
}

fn rotate_rows(m: &mut Mat, i: usize, j: usize, cos: f64, sin: f64) {
    let cols = m.cols();
    let (lo, hi) = (i.min(j), i.max(j));
    let (head, tail) = m.data_mut().split_at_mut(hi * cols);
    let row_lo = &mut head[lo * cols..(lo + 1) * cols];
    let row_hi = &mut tail[..cols];
    let (ri, rj) = if lo == i { (row_lo, row_hi) } else { (row_hi, row_lo) };
    for (x, y) in ri.iter_mut().zip(rj.iter_mut()) {
        let xi = *x;
        let yj = *y;
        *x = cos * xi - sin * yj;
        *y = sin * xi + cos * yj;
    }
}

/// Replaces the listed (numerically zero) columns of `u` with vectors
/// orthonormal to all other columns, chosen deterministically from the
/// standard basis.
fn complete_orthonormal(u: &mut Mat, deficient: &[usize]) {
    let p = u.rows();
    let q = u.cols();
    let mut candidate = 0usize;
    for &col in deficient {
        'search: while candidate < p {
            let mut vec_new: Vec<f64> = (0..p).map(|r| if r == candidate { 1.0 } else { 0.0 }).collect();
            candidate += 1;
            for other in 0..q {
                if deficient.contains(&other) && other >= col {
                    continue; // not yet filled
                }
                let dot: f64 = (0..p).map(|r| vec_new[r] * u[(r, other)]).sum();
                for (r, value) in vec_new.iter_mut().enumerate() {
                    *value -= dot * u[(r, other)];
                }
            }
            let norm = vec_new.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.5 {
                for (r, value) in vec_new.iter().enumerate() {
                    u[(r, col)] = value / norm;
                }
                break 'search;
            }
        }
    }
}

fn fix_signs(mut f: SvdFactors) -> SvdFactors {
    for col in 0..f.s.len() {
        let mut best = 0usize;
        let mut best_abs = -1.0;
        for r in 0..f.u.rows() {
            let a = f.u[(r, col)].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if f.u[(best, col)] < 0.0 {
            for r in 0..f.u.rows() {
                f.u[(r, col)] = -f.u[(r, col)];
            }
            for r in 0..f.v.rows() {
                f.v[(r, col)] = -f.v[(r, col)];
            }
        }
    }
    f
}

/// Proximal operator of `lambda * nuclear norm`: shrinks every singular
/// value by `lambda`, clamping at zero.
pub fn soft_threshold_svd(matrix: &Mat, lambda: f64) -> Result<Mat> {
    let mut factors = svd(matrix)?;
    for s in &mut factors.s {
        *s = (*s - lambda).max(0.0);
    }
    Ok(factors.reconstruct())
}

/// Result of [`lasso`]. `converged` is false when the sweep budget ran out
/// before the largest coordinate update fell below tolerance.
#[derive(Clone, Debug)]
pub struct LassoFit {
    pub weights: Vec<f64>,
    pub converged: bool,
    pub sweeps: usize,
}

/// Minimizes `||y - D b||^2 + eta * ||b||_1` by cyclic coordinate descent.
///
/// Each coordinate update is an exact minimization (soft-thresholding by
/// `eta / 2`), so the objective is non-increasing per sweep.
pub fn lasso(design: &Mat, response: &[f64], eta: f64, tol: f64, max_iter: usize) -> Result<LassoFit> {
    let n = design.rows();
    let p = design.cols();
    if response.len() != n {
        return Err(Error::Invalid(format!(
            "lasso: response length {} does not match design rows {n}",
            response.len()
        )));
    }
    if eta < 0.0 {
        return Err(Error::Invalid("lasso: eta must be non-negative".into()));
    }

    // Columns of the design, contiguous.
    let dt = design.transpose();
    let col_sq: Vec<f64> = (0..p).map(|j| dt.row(j).iter().map(|x| x * x).sum()).collect();
    if eta == 0.0 {
        if let Some(j) = col_sq.iter().position(|&c| c == 0.0) {
            return Err(Error::Invalid(format!(
                "lasso: column {j} is identically zero and eta = 0"
            )));
        }
    }

    let mut beta = vec![0.0; p];
    let mut residual: Vec<f64> = response.to_vec();
    let mut converged = false;
    let mut sweeps = 0;
    while sweeps < max_iter {
        sweeps += 1;
        let mut max_delta = 0.0f64;
        for j in 0..p {
            if col_sq[j] == 0.0 {
                continue;
            }
            let col = dt.row(j);
            let mut rho = 0.0;
            for (&d, &r) in col.iter().zip(&residual) {
                rho += d * r;
            }
            rho += col_sq[j] * beta[j];
            let new = soft_threshold(rho, eta / 2.0) / col_sq[j];
            let delta = new - beta[j];
            if delta != 0.0 {
                for (r, &d) in residual.iter_mut().zip(col) {
                    *r -= delta * d;
                }
                beta[j] = new;
            }
            max_delta = max_delta.max(delta.abs());
        }
        if max_delta < tol {
            converged = true;
            break;
        }
    }
    Ok(LassoFit { weights: beta, converged, sweeps })
}

#[inline]
fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Root mean squared error over positions where `mask` is true.
pub fn rmse_masked(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Invalid(format!(
            "rmse_masked: length mismatch ({}, {}, {})",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for ((&p, &t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            let d = p - t;
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Invalid("rmse_masked: mask has no true entries".into()));
    }
    Ok((sum / count as f64).sqrt())
}

/// Squared-error objective of the LASSO problem, used by tests and by the
/// non-convergence diagnostics of callers.
pub fn lasso_objective(design: &Mat, response: &[f64], eta: f64, beta: &[f64]) -> f64 {
    let n = design.rows();
    let mut sq = 0.0;
    for i in 0..n {
        let fit: f64 = design.row(i).iter().zip(beta).map(|(&d, &b)| d * b).sum();
        let r = response[i] - fit;
        sq += r * r;
    }
    sq + eta * beta.iter().map(|b| b.abs()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn svd_identity() {
        let f = svd(&Mat::identity(3)).unwrap();
        for &s in &f.s {
            assert_relative_eq!(s, 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn svd_diagonal() {
        let m = Mat::from_rows(&[&[3.0, 0.0, 0.0], &[0.0, 2.0, 0.0], &[0.0, 0.0, 1.0]]);
        let f = svd(&m).unwrap();
        assert_relative_eq!(f.s[0], 3.0, max_relative = 1e-12);
        assert_relative_eq!(f.s[1], 2.0, max_relative = 1e-12);
        assert_relative_eq!(f.s[2], 1.0, max_relative = 1e-12);
        assert!(f.reconstruct().max_abs_diff(&m) < 1e-10);
    }

    #[test]
    fn svd_rejects_non_finite() {
        let m = Mat::from_rows(&[&[1.0, f64::NAN]]);
        assert!(matches!(svd(&m), Err(Error::Invalid(_))));
    }

    #[test]
    fn svd_rank_deficient_factors_stay_orthonormal() {
        // Rank-1 matrix: remaining singular vectors come from completion.
        let m = Mat::from_rows(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[3.0, 6.0, 9.0]]);
        let f = svd(&m).unwrap();
        let gram = f.u.matmul_ta(&f.u);
        assert!(gram.max_abs_diff(&Mat::identity(3)) < 1e-8);
        assert!(f.reconstruct().max_abs_diff(&m) < 1e-8);
    }

    #[test]
    fn soft_threshold_svd_diagonal() {
        let m = Mat::from_rows(&[&[5.0, 0.0], &[0.0, 2.0]]);
        let out = soft_threshold_svd(&m, 1.0).unwrap();
        let expect = Mat::from_rows(&[&[4.0, 0.0], &[0.0, 1.0]]);
        assert!(out.max_abs_diff(&expect) < 1e-10);
    }

    #[test]
    fn soft_threshold_svd_identity_at_zero_lambda() {
        let m = Mat::from_rows(&[&[1.0, -2.0], &[0.5, 3.0], &[2.0, 0.0]]);
        assert!(soft_threshold_svd(&m, 0.0).unwrap().max_abs_diff(&m) < 1e-10);
    }

    #[test]
    fn soft_threshold_svd_large_lambda_zeroes() {
        let m = Mat::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let s1 = svd(&m).unwrap().s[0];
        let out = soft_threshold_svd(&m, s1 + 1e-9).unwrap();
        assert!(out.frob_norm() < 1e-9);
    }

    #[test]
    fn lasso_ols_limit() {
        // eta = 0 on a square invertible design recovers the exact solution.
        let design = Mat::from_rows(&[&[2.0, 1.0], &[1.0, 3.0]]);
        let beta_true = [0.7, -0.4];
        let y: Vec<f64> = (0..2)
            .map(|i| design.row(i).iter().zip(&beta_true).map(|(&d, &b)| d * b).sum())
            .collect();
        let fit = lasso(&design, &y, 0.0, 1e-12, 10_000).unwrap();
        assert!(fit.converged);
        assert_relative_eq!(fit.weights[0], 0.7, max_relative = 1e-6);
        assert_relative_eq!(fit.weights[1], -0.4, max_relative = 1e-6);
    }

    #[test]
    fn lasso_orthonormal_soft_threshold_oracle() {
        // Identity design: minimizer is y soft-thresholded by eta / 2.
        let design = Mat::identity(2);
        let fit = lasso(&design, &[3.0, -1.0], 2.0, 1e-12, 1000).unwrap();
        assert_relative_eq!(fit.weights[0], 2.0, epsilon = 1e-10);
        assert_relative_eq!(fit.weights[1], 0.0, epsilon = 1e-10);
    }

    #[test]
    fn lasso_full_shrinkage() {
        let design = Mat::from_rows(&[&[1.0, 0.5], &[0.2, 1.0], &[0.0, 0.3]]);
        let y = [1.0, -2.0, 0.5];
        let max_corr = (0..2)
            .map(|j| (0..3).map(|i| design[(i, j)] * y[i]).sum::<f64>().abs())
            .fold(0.0, f64::max);
        let fit = lasso(&design, &y, 2.0 * max_corr + 1.0, 1e-12, 1000).unwrap();
        assert!(fit.weights.iter().all(|&b| b == 0.0));
    }

    #[test]
    fn lasso_zero_column_requires_penalty() {
        let design = Mat::from_rows(&[&[1.0, 0.0], &[0.5, 0.0]]);
        assert!(lasso(&design, &[1.0, 1.0], 0.0, 1e-9, 10).is_err());
        assert!(lasso(&design, &[1.0, 1.0], 0.1, 1e-9, 100).is_ok());
    }

    #[test]
    fn lasso_flags_non_convergence() {
        let design = Mat::from_rows(&[&[1.0, 0.99], &[0.99, 1.0]]);
        let fit = lasso(&design, &[1.0, -1.0], 0.0, 1e-300, 2).unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.sweeps, 2);
    }

    #[test]
    fn rmse_masked_arithmetic() {
        assert_eq!(rmse_masked(&[1.0, 2.0], &[1.0, 2.0], &[true, true]).unwrap(), 0.0);
        let v = rmse_masked(&[3.0, 4.0], &[0.0, 0.0], &[true, true]).unwrap();
        assert_relative_eq!(v, 12.5f64.sqrt(), max_relative = 1e-12);
    }

    #[test]
    fn rmse_masked_ignores_false_positions() {
        let a = rmse_masked(&[1.0, 100.0], &[0.0, 0.0], &[true, false]).unwrap();
        let b = rmse_masked(&[1.0], &[0.0], &[true]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rmse_masked_empty_mask_errors() {
        assert!(rmse_masked(&[1.0], &[1.0], &[false]).is_err());
    }
}
