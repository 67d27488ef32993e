//! Second-order Gaussian model-X knockoffs, permutation ("invalid")
//! knockoffs, and exchangeability diagnostics.
//!
//! Knockoffs are sampled from
//!
//! ```text
//! X̃ | X ~ N( X − diag(s) Σ⁻¹ (X − μ),  2 diag(s) − diag(s) Σ⁻¹ diag(s) )
//! ```
//!
//! which is the mean-zero construction applied to centered features, so that
//! `(X, X̃)` has equal diagonal covariance blocks `Σ` and off-diagonal blocks
//! `Σ − diag(s)`.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Task;
use crate::error::{Error, Result};
use crate::linalg;
use crate::rng::{self, stage};

/// Tolerance on the smallest eigenvalue of the conditional covariance.
pub const PSD_TOLERANCE: f64 = 1e-10;
const BACKOFF: f64 = 0.99;
const MAX_BACKOFF_STEPS: usize = 2000;

#[derive(Clone, Debug)]
pub struct KnockoffModel {
    pub mu: DVector<f64>,
    pub sigma: DMatrix<f64>,
    pub s: DVector<f64>,
    /// `L` with `L Lᵀ = 2 diag(s) − diag(s) Σ⁻¹ diag(s)`.
    pub conditional_cov_factor: DMatrix<f64>,
    /// `diag(s) Σ⁻¹`
    shrink_toward_mean: DMatrix<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KnockoffMethod {
    #[default]
    Gaussian,
    Permutation,
}

impl std::str::FromStr for KnockoffMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(Self::Gaussian),
            "permutation" => Ok(Self::Permutation),
            other => Err(Error::InvalidArgument(format!(
                "unknown knockoff method {other:?}"
            ))),
        }
    }
}

/// Shrinkage used when none is given: heavier when n is small relative to p.
pub fn default_shrinkage(n: usize, p: usize) -> f64 {
    if n < 10 * p {
        0.1
    } else {
        0.01
    }
}

impl KnockoffModel {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn conditional_covariance(&self) -> DMatrix<f64> {
        conditional_covariance(&self.sigma, &self.s).0
    }
}

fn conditional_covariance(sigma: &DMatrix<f64>, s: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    // Cholesky already succeeded for this sigma in the caller.
    let inv = sigma
        .clone()
        .cholesky()
        .expect("positive definite")
        .inverse();
    let ds = DMatrix::from_diagonal(s);
    let shift = &ds * &inv;
    let cond = &ds * 2.0 - &shift * &ds;
    (0.5 * (&cond + cond.transpose()), shift)
}

/// Fits mean, shrunk covariance and equicorrelated `s` to the feature matrix.
pub fn fit_gaussian(x: &DMatrix<f64>, shrinkage: f64) -> Result<KnockoffModel> {
    let (n, p) = x.shape();
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 rows, got {n}"
        )));
    }
    if p == 0 {
        return Err(Error::InvalidArgument("no feature columns".into()));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::InvalidArgument(format!(
            "shrinkage must be in [0,1], got {shrinkage}"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(
            "feature matrix contains NaN or infinite entries".into(),
        ));
    }
    let mu = linalg::column_means(x);
    let sample = linalg::covariance(x);
    let scale = sample.diagonal().mean().abs().max(f64::MIN_POSITIVE);
    if let Some(j) = (0..p).find(|&j| sample[(j, j)] <= 1e-12 * scale) {
        return Err(Error::SingularCovariance(format!(
            "column {} has zero variance",
            j + 1
        )));
    }
    let diag = DMatrix::from_diagonal(&sample.diagonal());
    let sigma = sample * (1.0 - shrinkage) + diag * shrinkage;
    fit_from_moments(mu, sigma)
}

/// Equicorrelated knockoff model for a known mean and covariance.
pub fn fit_from_moments(mu: DVector<f64>, sigma: DMatrix<f64>) -> Result<KnockoffModel> {
    let p = sigma.nrows();
    if sigma.ncols() != p || mu.len() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: mu.len(),
        });
    }
    let sd = sigma.diagonal().map(f64::sqrt);
    let corr = DMatrix::from_fn(p, p, |i, j| sigma[(i, j)] / (sd[i] * sd[j]));
    let lambda_min = linalg::min_eigenvalue(&corr);
    if !(lambda_min > 1e-10) || sigma.clone().cholesky().is_none() {
        return Err(Error::SingularCovariance(format!(
            "smallest correlation eigenvalue {lambda_min:.3e}"
        )));
    }
    let s_corr = (2.0 * lambda_min).min(1.0);
    let mut s = sigma.diagonal() * s_corr;
    let mut steps = 0;
    let (cond, shift) = loop {
        let (cond, shift) = conditional_covariance(&sigma, &s);
        if linalg::min_eigenvalue(&cond) >= -PSD_TOLERANCE || steps >= MAX_BACKOFF_STEPS {
            break (cond, shift);
        }
        s *= BACKOFF;
        steps += 1;
    };
    Ok(KnockoffModel {
        mu,
        sigma,
        s,
        conditional_cov_factor: linalg::psd_factor(&cond),
        shrink_toward_mean: shift,
    })
}

/// Samples one knockoff row per row of `x`. The standard normal draws come
/// row-major from stream `(seed, GAUSSIAN_KNOCKOFF, 0)`.
pub fn sample_knockoffs(
    model: &KnockoffModel,
    x: &DMatrix<f64>,
    seed: u64,
) -> Result<DMatrix<f64>> {
    let p = model.dim();
    if x.ncols() != p {
        return Err(Error::DimensionMismatch {
            expected: p,
            got: x.ncols(),
        });
    }
    let n = x.nrows();
    let mut centered = x.clone();
    for (c, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-model.mu[c]);
    }
    let mut rng = rng::stream(seed, stage::GAUSSIAN_KNOCKOFF, 0);
    let mut z = DMatrix::<f64>::zeros(n, p);
    for r in 0..n {
        for c in 0..p {
            z[(r, c)] = StandardNormal.sample(&mut rng);
        }
    }
    Ok(x - centered * model.shrink_toward_mean.transpose()
        + z * model.conditional_cov_factor.transpose())
}

/// Independently permutes every column; column `j` uses stream
/// `(seed, PERMUTATION_KNOCKOFF, j)`.
pub fn permutation_knockoffs(x: &DMatrix<f64>, seed: u64) -> DMatrix<f64> {
    let mut out = x.clone();
    for (c, mut col) in out.column_iter_mut().enumerate() {
        let mut rng = rng::stream(seed, stage::PERMUTATION_KNOCKOFF, c as u32);
        col.as_mut_slice().shuffle(&mut rng);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    /// max_j |mean(X_j) − mean(X̃_j)|
    pub mean_gap: f64,
    /// max entrywise |cov(X) − cov(X̃)|
    pub cov_gap: f64,
    /// max entrywise gap between cross-cov(X, X̃) and cov(X) with its
    /// diagonal replaced by the cross-covariance diagonal
    pub cross_cov_gap: f64,
    /// min_j (cov(X)_jj − crosscov_jj) / cov(X)_jj; zero means the
    /// knockoffs are copies of the originals (s = 0)
    pub min_relative_s: f64,
}

pub fn diagnostics(x: &DMatrix<f64>, x_tilde: &DMatrix<f64>) -> Result<DiagnosticsReport> {
    if x.shape() != x_tilde.shape() {
        return Err(Error::InvalidArgument(format!(
            "shape mismatch {:?} vs {:?}",
            x.shape(),
            x_tilde.shape()
        )));
    }
    let p = x.ncols();
    let mean_gap = (linalg::column_means(x) - linalg::column_means(x_tilde)).amax();
    let cov = linalg::covariance(x);
    let cov_gap = (&cov - linalg::covariance(x_tilde)).amax();
    let cross = linalg::cross_covariance(x, x_tilde);
    let mut reference = cov.clone();
    for j in 0..p {
        reference[(j, j)] = cross[(j, j)];
    }
    let cross_cov_gap = (&cross - reference).amax();
    let min_relative_s = (0..p)
        .map(|j| (cov[(j, j)] - cross[(j, j)]) / cov[(j, j)])
        .fold(f64::INFINITY, f64::min);
    Ok(DiagnosticsReport {
        mean_gap,
        cov_gap,
        cross_cov_gap,
        min_relative_s,
    })
}

/// Originals in columns `0..p`, knockoffs in `p..2p`.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedDataset {
    pub columns: DMatrix<f64>,
    pub response: Vec<f64>,
    pub task: Task,
}

impl AugmentedDataset {
    pub fn new(
        x: &DMatrix<f64>,
        x_tilde: &DMatrix<f64>,
        response: Vec<f64>,
        task: Task,
    ) -> Result<Self> {
        if x.shape() != x_tilde.shape() {
            return Err(Error::DimensionMismatch {
                expected: x.ncols(),
                got: x_tilde.ncols(),
            });
        }
        if response.len() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                got: response.len(),
            });
        }
        let (n, p) = x.shape();
        let columns = DMatrix::from_fn(n, 2 * p, |r, c| {
            if c < p {
                x[(r, c)]
            } else {
                x_tilde[(r, c - p)]
            }
        });
        Ok(Self {
            columns,
            response,
            task,
        })
    }

    /// Number of original features.
    pub fn p(&self) -> usize {
        self.columns.ncols() / 2
    }

    pub fn n_samples(&self) -> usize {
        self.columns.nrows()
    }

    /// Partner column of `j` under the original ↔ knockoff swap.
    pub fn knockoff_of(&self, j: usize) -> usize {
        let p = self.p();
        if j < p {
            j + p
        } else {
            j - p
        }
    }

    pub fn subset(&self, idx: &[usize]) -> AugmentedDataset {
        let columns = DMatrix::from_fn(idx.len(), self.columns.ncols(), |r, c| {
            self.columns[(idx[r], c)]
        });
        let response = idx.iter().map(|&r| self.response[r]).collect();
        AugmentedDataset {
            columns,
            response,
            task: self.task,
        }
    }

    pub fn column_names(&self) -> Vec<String> {
        let p = self.p();
        (1..=p)
            .map(|j| format!("x{j}"))
            .chain((1..=p).map(|j| format!("x{j}_ko")))
            .collect()
    }
}
