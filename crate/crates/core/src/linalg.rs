//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Sample covariance with the n − 1 denominator.
pub fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    cross_covariance(x, x)
}

/// Sample cross-covariance `cov(a_i, b_j)` with the n − 1 denominator.
pub fn cross_covariance(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let ca = center(a);
    let cb = center(b);
    (ca.transpose() * cb) / (n as f64 - 1.0)
}

fn center(x: &DMatrix<f64>) -> DMatrix<f64> {
    let mu = column_means(x);
    let mut out = x.clone();
    for (c, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-mu[c]);
    }
    out
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

/// Symmetric square-root factor `L` with `L Lᵀ = m`, clipping tiny negative
/// eigenvalues to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut v = eig.eigenvectors;
    for (k, mut col) in v.column_iter_mut().enumerate() {
        col *= eig.eigenvalues[k].max(0.0).sqrt();
    }
    v
}

/// Pseudo-inverse of a symmetric matrix, dropping eigenvalues below
/// `rcond · max|λ|`.
pub fn symmetric_pinv(m: &DMatrix<f64>, rcond: f64) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let cutoff = rcond * eig.eigenvalues.amax();
    let n = m.nrows();
    let mut out = DMatrix::zeros(n, n);
    for k in 0..n {
        let lam = eig.eigenvalues[k];
        if lam.abs() > cutoff && lam != 0.0 {
            let v = eig.eigenvectors.column(k);
            out += (v * v.transpose()) / lam;
        }
    }
    out
}

/// Two-sample Kolmogorov–Smirnov statistic.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let t = a[i].min(b[j]);
        while i < a.len() && a[i] <= t {
            i += 1;
        }
        while j < b.len() && b[j] <= t {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}
