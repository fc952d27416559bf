//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

use crate::rng::Rng;

pub fn frob(m: &DMatrix<f64>) -> f64 {
    m.norm()
}

pub fn frob_dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.dot(b)
}

/// Row-major flattening, used as the coordinate system for d×d unknowns.
pub fn flatten(m: &DMatrix<f64>) -> Vec<f64> {
    let (r, c) = m.shape();
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(m[(i, j)]);
        }
    }
    out
}

pub fn unflatten(v: &[f64], rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(rows, cols, v)
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Operator norm by power iteration on MᵀM.
///
/// The start vector is drawn from `rng`; iteration stops at `max_iter` or when
/// the relative change of the estimate falls below `tol`.
pub fn op_norm_with(m: &DMatrix<f64>, rng: &mut Rng, max_iter: usize, tol: f64) -> f64 {
    let n = m.ncols();
    if n == 0 || m.nrows() == 0 {
        return 0.0;
    }
    let mut v = DVector::from_fn(n, |_, _| rng.random::<f64>() - 0.5);
    let nv = v.norm();
    if nv == 0.0 {
        v[0] = 1.0;
    } else {
        v /= nv;
    }
    let mut est = 0.0;
    for _ in 0..max_iter {
        let mv = m * &v;
        let w = m.transpose() * &mv;
        let nw = w.norm();
        if nw == 0.0 {
            return 0.0;
        }
        let new_est = mv.norm();
        v = w / nw;
        if (new_est - est).abs() <= tol * new_est.max(f64::MIN_POSITIVE) {
            est = new_est;
            break;
        }
        est = new_est;
    }
    // one final Rayleigh evaluation with the converged vector
    est.max((m * &v).norm())
}

/// Operator norm with the default 500-iteration cap and 1e-8 tolerance and a
/// start vector fixed by `seed`.
pub fn op_norm(m: &DMatrix<f64>, seed: u64) -> f64 {
    let mut rng = crate::rng::seeded(seed);
    op_norm_with(m, &mut rng, 500, 1e-8)
}

pub fn sigma_min(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    let sv = m.clone().svd(false, false).singular_values;
    sv.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Solves a square system with partial-pivot LU. Returns `None` when singular.
pub fn lu_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().lu().solve(b)
}

/// Solves the symmetric positive semi-definite system (G + ridge·I) x = b.
pub fn spd_solve(g: &DMatrix<f64>, b: &DMatrix<f64>, ridge: f64) -> Option<DMatrix<f64>> {
    let n = g.nrows();
    let mut a = g.clone();
    for i in 0..n {
        a[(i, i)] += ridge;
    }
    match a.clone().cholesky() {
        Some(ch) => Some(ch.solve(b)),
        None => a.lu().solve(b),
    }
}

/// Minimum-norm least-squares solution of A x = b via SVD.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>, rcond: f64) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let eps = rcond * smax.max(f64::MIN_POSITIVE);
    svd.solve(b, eps).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_norm_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -3.0, 2.0]));
        assert!((op_norm(&m, 1) - 3.0).abs() < 1e-7);
    }

    #[test]
    fn op_norm_matches_svd() {
        let mut rng = crate::rng::seeded(3);
        let m = DMatrix::from_fn(9, 7, |_, _| rng.random::<f64>() - 0.5);
        let sv = m.clone().svd(false, false).singular_values;
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        assert!((op_norm(&m, 5) - smax).abs() <= 1e-6 * smax);
    }

    #[test]
    fn flatten_round_trip() {
        let m = DMatrix::from_fn(3, 4, |i, j| (i * 10 + j) as f64);
        assert_eq!(unflatten(&flatten(&m), 3, 4), m);
        assert_eq!(flatten(&m)[5], 11.0);
    }

    #[test]
    fn pinv_handles_rank_deficiency() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 2.0]);
        let x = pinv_solve(&a, &b, 1e-12);
        assert!((x[0] - 1.0).abs() < 1e-12 && (x[1] - 1.0).abs() < 1e-12);
    }
}
