//! Dense symmetric linear algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{GamError, Result};

/// Ratio of extreme absolute eigenvalues of a symmetric matrix.
pub fn condition_estimate(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen();
    let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
    let max = abs.iter().copied().fold(0.0, f64::max);
    let min = abs.iter().copied().fold(f64::INFINITY, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    m.clone().cholesky().ok_or_else(|| GamError::Singular {
        reason: format!("{what} is not positive definite"),
        condition: condition_estimate(m),
    })
}

pub fn chol_logdet(c: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// `X' diag(w) X`.
pub fn xtwx(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (i, wi) in w.iter().enumerate() {
        xw.row_mut(i).scale_mut(*wi);
    }
    let m = x.tr_mul(&xw);
    (&m + m.transpose()) * 0.5
}

/// `X' diag(w) z`.
pub fn xtwz(x: &DMatrix<f64>, w: &[f64], z: &[f64]) -> DVector<f64> {
    let wz = DVector::from_iterator(w.len(), w.iter().zip(z).map(|(a, b)| a * b));
    x.tr_mul(&wz)
}

/// Row-wise quadratic forms `x_i' M x_i`.
pub fn row_quadratic_forms(x: &DMatrix<f64>, m: &DMatrix<f64>) -> Vec<f64> {
    let xm = x * m;
    (0..x.nrows())
        .map(|i| xm.row(i).iter().zip(x.row(i).iter()).map(|(a, b)| a * b).sum())
        .collect()
}

/// Pseudo-inverse of a symmetric PSD matrix keeping its `rank` largest eigenvalues.
pub fn pinv_truncated(m: &DMatrix<f64>, rank: usize) -> DMatrix<f64> {
    let eig = m.clone().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for &k in order.iter().take(rank) {
        let ev = eig.eigenvalues[k];
        if ev <= 0.0 {
            continue;
        }
        let u = eig.eigenvectors.column(k);
        out += (u * u.transpose()) / ev;
    }
    out
}

/// Rank and log pseudo-determinant of a symmetric PSD matrix, with
/// eigenvalues below `tol * max eigenvalue` treated as zero.
pub fn rank_logdet_psd(m: &DMatrix<f64>, tol: f64) -> (usize, f64) {
    let eig = m.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let mut rank = 0;
    let mut logdet = 0.0;
    for &v in eig.eigenvalues.iter() {
        if v > tol * max {
            rank += 1;
            logdet += v.ln();
        }
    }
    (rank, logdet)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn xtwx_matches_dense_product() {
        let x = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let w = [0.5, 2.0, 1.0];
        let dense = x.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(&w)) * &x;
        assert!((xtwx(&x, &w) - dense).abs().max() < 1e-12);
    }

    #[test]
    fn pseudo_determinant_of_projector_like_matrix() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]);
        let (r, ld) = rank_logdet_psd(&m, 1e-10);
        assert_eq!(r, 1);
        assert!((ld - 4f64.ln()).abs() < 1e-12);
        let p = pinv_truncated(&m, 1);
        assert!((p[(0, 0)] - 0.125).abs() < 1e-12);
    }

    #[test]
    fn singular_cholesky_reports_condition() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        match cholesky(&m, "test") {
            Err(GamError::Singular { condition, .. }) => assert!(condition > 1e10),
            other => panic!("unexpected {other:?}"),
        }
    }
}
