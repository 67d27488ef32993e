//! Non-additivity distillation.
//!
//! Pairwise importance is modelled as
//!
//! ```text
//! e_ij = s_ij + g(e_i) + g(e_j) + β_i + β_j + c
//! ```
//!
//! with a single shared penalized cubic B-spline `g`, per-column biases `β`
//! and an intercept `c`, fitted by weighted penalized least squares. The
//! residuals `s_ij` are the non-additive interaction scores. Weights are the
//! probability of each pair's own class (original-only vs knockoff-involving)
//! under a ridge logistic regression on the univariate importances.

use nalgebra::{DMatrix, DVector, Matrix4, Vector4};
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionResult;
use crate::data::{Category, Pair};
use crate::error::{Error, Result};
use crate::fdr::{InteractionScoreSet, ScoreEntry};
use crate::linalg::symmetric_pinv;
use crate::spline::{difference_penalty, BSplineBasis};

pub const WEIGHT_FLOOR: f64 = 1e-3;
const MIN_PAIRS: usize = 10;
/// Ridge on the bias coefficients, relative to the design scale; separates
/// the smooth from the per-column biases.
const BIAS_RIDGE: f64 = 1e-9;
const PINV_RCOND: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub pair: Pair,
    pub e_ij: f64,
    pub e_i: f64,
    pub e_j: f64,
    pub category: Category,
    pub self_pair: bool,
}

/// Records for every `i < j` over the augmented columns, self pairs included
/// and flagged.
pub fn pair_records(attr: &AttributionResult) -> Vec<PairRecord> {
    let d = attr.dim();
    let p = d / 2;
    let mut out = Vec::with_capacity(d * (d - 1) / 2);
    for i in 0..d {
        for j in i + 1..d {
            let pair = Pair::new(i, j);
            out.push(PairRecord {
                pair,
                e_ij: attr.e2d[i][j],
                e_i: attr.e1d[i],
                e_j: attr.e1d[j],
                category: pair.category(p),
                self_pair: pair.is_self_pair(p),
            });
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit {
    pub intercept: f64,
    /// Coefficients on the standardized covariates `(e_i, e_j, e_i + e_j)`.
    pub coefficients: [f64; 3],
    pub weights: Vec<f64>,
}

/// Own-class probabilities from an L2-regularized logistic regression of
/// "knockoff-involving" on `(e_i, e_j, e_i + e_j)`, floored at
/// [`WEIGHT_FLOOR`]. Covariates are standardized; the intercept is not
/// penalized.
pub fn compute_pair_weights(pairs: &[PairRecord], reg: f64) -> Result<LogisticFit> {
    if !(reg >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "regularization must be nonnegative, got {reg}"
        )));
    }
    let labels: Vec<f64> = pairs
        .iter()
        .map(|r| r.category.is_knockoff_involving() as u8 as f64)
        .collect();
    let positives = labels.iter().filter(|&&l| l == 1.0).count();
    if positives == 0 || positives == pairs.len() {
        return Err(Error::SingleClass(
            "pair weights need both original-only and knockoff-involving pairs".into(),
        ));
    }
    let raw: Vec<[f64; 3]> = pairs
        .iter()
        .map(|r| [r.e_i, r.e_j, r.e_i + r.e_j])
        .collect();
    let n = raw.len() as f64;
    let mut cov = vec![[1.0; 4]; raw.len()];
    for c in 0..3 {
        let mean = raw.iter().map(|v| v[c]).sum::<f64>() / n;
        let sd = (raw.iter().map(|v| (v[c] - mean).powi(2)).sum::<f64>() / n).sqrt();
        for (row, v) in cov.iter_mut().zip(&raw) {
            row[c + 1] = if sd > 1e-12 * mean.abs().max(1e-300) {
                (v[c] - mean) / sd
            } else {
                0.0
            };
        }
    }
    let mut theta = Vector4::zeros();
    let prior = positives as f64 / n;
    theta[0] = (prior / (1.0 - prior)).ln();
    for _ in 0..100 {
        let mut grad = Vector4::zeros();
        let mut hess = Matrix4::zeros();
        for (x, &y) in cov.iter().zip(&labels) {
            let xv = Vector4::from_column_slice(x);
            let prob = sigmoid(theta.dot(&xv));
            grad += xv * (prob - y);
            hess += xv * xv.transpose() * (prob * (1.0 - prob)).max(1e-12);
        }
        for k in 1..4 {
            grad[k] += reg * theta[k];
            hess[(k, k)] += reg;
        }
        // ridge on the collinear sum column keeps the system solvable when reg = 0
        for k in 1..4 {
            hess[(k, k)] += 1e-10;
        }
        let Some(step) = hess.lu().solve(&grad) else {
            break;
        };
        theta -= step;
        if step.amax() < 1e-10 {
            break;
        }
    }
    let weights = cov
        .iter()
        .zip(&labels)
        .map(|(x, &y)| {
            let prob = sigmoid(theta.dot(&Vector4::from_column_slice(x)));
            let own = if y == 1.0 { prob } else { 1.0 - prob };
            own.max(WEIGHT_FLOOR)
        })
        .collect();
    Ok(LogisticFit {
        intercept: theta[0],
        coefficients: [theta[1], theta[2], theta[3]],
        weights,
    })
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplineConfig {
    pub n_interior_knots: usize,
    pub degree: usize,
    pub penalty_order: usize,
    /// Candidate smoothing parameters (relative to the design scale) for GCV.
    pub lambdas: Vec<f64>,
}

impl Default for SplineConfig {
    fn default() -> Self {
        SplineConfig {
            n_interior_knots: 10,
            degree: 3,
            penalty_order: 2,
            lambdas: (-3..=3).map(|e| 10f64.powi(e)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub logistic_reg: f64,
    pub spline: SplineConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            logistic_reg: 1.0,
            spline: SplineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub weighted_r2: f64,
    pub effective_dof: f64,
    pub lambda: f64,
    pub gcv: f64,
    /// Covariates were constant; only intercept and biases were fitted.
    pub bias_only_fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillationResult {
    /// `(pair, s_ij)` for the fitted pairs, in input order.
    pub scores: Vec<(Pair, f64)>,
    pub weights: Vec<f64>,
    pub knots: Vec<f64>,
    pub smooth_g: Vec<f64>,
    pub bias_beta: Vec<f64>,
    pub intercept: f64,
    pub fit_diagnostics: FitDiagnostics,
}

/// Design matrix `[1 | B(e_i) + B(e_j) | I_ij]` and its penalty (unscaled).
pub(crate) struct Design {
    pub x: DMatrix<f64>,
    pub smooth_cols: std::ops::Range<usize>,
    pub bias_cols: std::ops::Range<usize>,
    pub smooth_penalty: DMatrix<f64>,
    pub basis: Option<BSplineBasis>,
}

pub(crate) fn build_design(pairs: &[PairRecord], dim: usize, cfg: &SplineConfig) -> Design {
    let covariates: Vec<f64> = pairs.iter().flat_map(|r| [r.e_i, r.e_j]).collect();
    let lo = covariates.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = covariates.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let spread_ok = hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(1e-300);
    let basis = spread_ok
        .then(|| BSplineBasis::from_quantiles(&covariates, cfg.n_interior_knots, cfg.degree));
    let k = basis.as_ref().map_or(0, |b| b.len());
    let ncols = 1 + k + dim;
    let mut x = DMatrix::zeros(pairs.len(), ncols);
    for (r, rec) in pairs.iter().enumerate() {
        x[(r, 0)] = 1.0;
        if let Some(b) = &basis {
            for (c, (u, v)) in b.eval(rec.e_i).into_iter().zip(b.eval(rec.e_j)).enumerate() {
                x[(r, 1 + c)] = u + v;
            }
        }
        x[(r, 1 + k + rec.pair.i)] += 1.0;
        x[(r, 1 + k + rec.pair.j)] += 1.0;
    }
    let smooth_penalty = if k > 0 {
        difference_penalty(k, cfg.penalty_order)
    } else {
        DMatrix::zeros(0, 0)
    };
    Design {
        x,
        smooth_cols: 1..1 + k,
        bias_cols: 1 + k..ncols,
        smooth_penalty,
        basis,
    }
}

pub(crate) struct PenalizedFit {
    pub theta: DVector<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    pub penalty: DMatrix<f64>,
    pub fitted: DVector<f64>,
    pub edf: f64,
}

pub(crate) fn solve_penalized(
    design: &Design,
    w: &DVector<f64>,
    e: &DVector<f64>,
    lambda: f64,
) -> PenalizedFit {
    let x = &design.x;
    let ncols = x.ncols();
    let mut xw = x.clone();
    for (r, mut row) in xw.row_iter_mut().enumerate() {
        row *= w[r];
    }
    let gram = x.transpose() * &xw;
    let scale = (gram.trace() / ncols as f64).max(f64::MIN_POSITIVE);
    let mut penalty = DMatrix::zeros(ncols, ncols);
    let sm = design.smooth_cols.clone();
    if !sm.is_empty() {
        penalty
            .view_mut((sm.start, sm.start), (sm.len(), sm.len()))
            .copy_from(&(&design.smooth_penalty * (lambda * scale)));
    }
    for c in design.bias_cols.clone() {
        penalty[(c, c)] = BIAS_RIDGE * scale;
    }
    let system = &gram + &penalty;
    let inv = symmetric_pinv(&system, PINV_RCOND);
    let theta = &inv * (xw.transpose() * e);
    let fitted = x * &theta;
    let edf = (&inv * &gram).trace();
    PenalizedFit {
        theta,
        penalty,
        fitted,
        edf,
    }
}

/// Weighted penalized fit of the additive surface; GCV picks the smoothing
/// parameter from `cfg.lambdas`.
pub fn fit_additive_surface(
    pairs: &[PairRecord],
    weights: &[f64],
    dim: usize,
    cfg: &SplineConfig,
) -> Result<DistillationResult> {
    if pairs.len() < MIN_PAIRS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_PAIRS} pairs, got {}",
            pairs.len()
        )));
    }
    if weights.len() != pairs.len() {
        return Err(Error::DimensionMismatch {
            expected: pairs.len(),
            got: weights.len(),
        });
    }
    if weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidArgument(
            "weights must be positive and finite".into(),
        ));
    }
    if pairs
        .iter()
        .any(|r| !(r.e_ij.is_finite() && r.e_i.is_finite() && r.e_j.is_finite()))
    {
        return Err(Error::NonFinite("pair covariates".into()));
    }
    if pairs.iter().any(|r| r.pair.j >= dim) {
        return Err(Error::InvalidArgument(
            "pair index exceeds dimension".into(),
        ));
    }
    if cfg.lambdas.is_empty() || cfg.lambdas.iter().any(|&l| !(l > 0.0)) {
        return Err(Error::InvalidArgument(
            "lambda grid must be nonempty and positive".into(),
        ));
    }
    let design = build_design(pairs, dim, cfg);
    let w = DVector::from_column_slice(weights);
    let e = DVector::from_iterator(pairs.len(), pairs.iter().map(|r| r.e_ij));
    let n = pairs.len() as f64;
    let rss = |fitted: &DVector<f64>| -> f64 {
        (0..pairs.len())
            .map(|r| w[r] * (e[r] - fitted[r]).powi(2))
            .sum()
    };

    let lambdas: Vec<f64> = if design.basis.is_some() {
        cfg.lambdas.clone()
    } else {
        vec![cfg.lambdas[0]]
    };
    let mut best: Option<(f64, f64, PenalizedFit)> = None;
    for &lambda in &lambdas {
        let fit = solve_penalized(&design, &w, &e, lambda);
        let denom = (n - fit.edf).max(1e-12);
        let gcv = n * rss(&fit.fitted) / (denom * denom);
        if best.as_ref().is_none_or(|(g, _, _)| gcv < *g) {
            best = Some((gcv, lambda, fit));
        }
    }
    let (gcv, lambda, fit) = best.expect("nonempty lambda grid");
    let wsum = w.sum();
    let mean = (0..pairs.len()).map(|r| w[r] * e[r]).sum::<f64>() / wsum;
    let tss: f64 = (0..pairs.len()).map(|r| w[r] * (e[r] - mean).powi(2)).sum();
    let rss_final = rss(&fit.fitted);
    let weighted_r2 = if tss > 0.0 {
        1.0 - rss_final / tss
    } else {
        1.0
    };
    let scores = pairs
        .iter()
        .enumerate()
        .map(|(r, rec)| (rec.pair, e[r] - fit.fitted[r]))
        .collect();
    Ok(DistillationResult {
        scores,
        weights: weights.to_vec(),
        knots: design
            .basis
            .as_ref()
            .map(|b| b.knots.clone())
            .unwrap_or_default(),
        smooth_g: fit
            .theta
            .rows(design.smooth_cols.start, design.smooth_cols.len())
            .iter()
            .copied()
            .collect(),
        bias_beta: fit
            .theta
            .rows(design.bias_cols.start, design.bias_cols.len())
            .iter()
            .copied()
            .collect(),
        intercept: fit.theta[0],
        fit_diagnostics: FitDiagnostics {
            weighted_r2,
            effective_dof: fit.edf,
            lambda,
            gcv,
            bias_only_fallback: design.basis.is_none(),
        },
    })
}

/// Γ from an attribution result: non-self pairs, pair weights, additive fit,
/// signed residual scores.
pub fn distill(
    attr: &AttributionResult,
    cfg: &DistillConfig,
) -> Result<(InteractionScoreSet, DistillationResult)> {
    attr.validate()?;
    let dim = attr.dim();
    let p = dim / 2;
    let pairs: Vec<PairRecord> = pair_records(attr)
        .into_iter()
        .filter(|r| !r.self_pair)
        .collect();
    let logistic = compute_pair_weights(&pairs, cfg.logistic_reg)?;
    let result = fit_additive_surface(&pairs, &logistic.weights, dim, &cfg.spline)?;
    let entries = pairs
        .iter()
        .zip(&result.scores)
        .zip(&result.weights)
        .map(|((rec, &(_, s)), &w)| ScoreEntry {
            pair: rec.pair,
            score: s,
            category: rec.category,
            weight: w,
        })
        .collect();
    Ok((InteractionScoreSet { p, entries }, result))
}

/// Γ without distillation: the raw (absolute) pairwise importance.
pub fn raw_scores(attr: &AttributionResult) -> Result<InteractionScoreSet> {
    attr.validate()?;
    let p = attr.dim() / 2;
    let entries = pair_records(attr)
        .into_iter()
        .filter(|r| !r.self_pair)
        .map(|r| ScoreEntry {
            pair: r.pair,
            score: r.e_ij,
            category: r.category,
            weight: 1.0,
        })
        .collect();
    Ok(InteractionScoreSet { p, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{AttributionSettings, Measure};
    use rand::Rng;

    fn records(e1d: &[f64], surface: impl Fn(usize, usize) -> f64) -> Vec<PairRecord> {
        let d = e1d.len();
        let p = d / 2;
        let mut out = Vec::new();
        for i in 0..d {
            for j in i + 1..d {
                let pair = Pair::new(i, j);
                if pair.is_self_pair(p) {
                    continue;
                }
                out.push(PairRecord {
                    pair,
                    e_ij: surface(i, j),
                    e_i: e1d[i],
                    e_j: e1d[j],
                    category: pair.category(p),
                    self_pair: false,
                });
            }
        }
        out
    }

    fn random_e1d(d: usize, seed: u64) -> Vec<f64> {
        let mut r = crate::rng::stream(seed, 93, 0);
        (0..d).map(|_| r.random_range(0.0..3.0)).collect()
    }

    fn fit(pairs: &[PairRecord], dim: usize) -> DistillationResult {
        let w = compute_pair_weights(pairs, 1.0).unwrap();
        fit_additive_surface(pairs, &w.weights, dim, &SplineConfig::default()).unwrap()
    }

    #[test]
    fn additive_surface_has_zero_residuals() {
        let e = random_e1d(30, 1);
        let pairs = records(&e, |i, j| e[i] + e[j]);
        let res = fit(&pairs, 30);
        let worst = res.scores.iter().map(|(_, s)| s.abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "max residual {worst}");
    }

    #[test]
    fn constant_surface_goes_to_intercept() {
        let e = random_e1d(20, 2);
        let pairs = records(&e, |_, _| 7.0);
        let res = fit(&pairs, 20);
        assert!(res.scores.iter().all(|(_, s)| s.abs() < 1e-6));
    }

    #[test]
    fn spike_is_recovered() {
        let e = random_e1d(30, 3);
        let pairs = records(&e, |i, j| {
            e[i] + e[j] + if (i, j) == (0, 1) { 10.0 } else { 0.0 }
        });
        let res = fit(&pairs, 30);
        for &(pair, s) in &res.scores {
            if pair == Pair::new(0, 1) {
                assert!((s - 10.0).abs() < 1.0, "spike {s}");
            } else {
                assert!(s.abs() < 1.0, "{pair:?} {s}");
            }
        }
    }

    #[test]
    fn penalized_normal_equations_hold() {
        let e = random_e1d(24, 4);
        let mut r = crate::rng::stream(5, 93, 1);
        let noise: Vec<f64> = (0..24 * 24).map(|_| r.random_range(-1.0..1.0)).collect();
        let pairs = records(&e, |i, j| (e[i] * e[j]).sqrt() + noise[i * 24 + j]);
        let w = compute_pair_weights(&pairs, 1.0).unwrap().weights;
        let design = build_design(&pairs, 24, &SplineConfig::default());
        let wv = DVector::from_column_slice(&w);
        let ev = DVector::from_iterator(pairs.len(), pairs.iter().map(|p| p.e_ij));
        let fit = solve_penalized(&design, &wv, &ev, 1.0);
        let resid = &ev - &fit.fitted;
        let weighted = resid.component_mul(&wv);
        let lhs = design.x.transpose() * weighted;
        let rhs = &fit.penalty * &fit.theta;
        let scale = ev.amax() * wv.sum();
        assert!(
            (&lhs - &rhs).amax() < 1e-6 * scale,
            "{}",
            (&lhs - &rhs).amax()
        );
        // the intercept column is unpenalized: plain orthogonality
        assert!(lhs[0].abs() < 1e-6 * scale);
    }

    #[test]
    fn identical_covariates_fall_back_to_bias_only() {
        let e = vec![1.0; 12];
        let pairs = records(&e, |i, j| (i * j) as f64);
        let w = vec![1.0; pairs.len()];
        let res = fit_additive_surface(&pairs, &w, 12, &SplineConfig::default()).unwrap();
        assert!(res.fit_diagnostics.bias_only_fallback);
        assert!(res.smooth_g.is_empty());
        assert!(fit_additive_surface(&pairs[..5], &w[..5], 12, &SplineConfig::default()).is_err());
    }

    #[test]
    fn weights_on_label_independent_covariates_match_priors() {
        // the same covariates repeated in both classes
        let d = 16;
        let p = 8;
        let e = random_e1d(d, 6);
        let mut pairs = records(&e, |_, _| 0.0);
        // give OO pairs the covariate multiset of knockoff-involving pairs
        let ko: Vec<(f64, f64)> = pairs
            .iter()
            .filter(|r| r.category != Category::OO)
            .map(|r| (r.e_i, r.e_j))
            .collect();
        for (k, r) in pairs.iter_mut().filter(|r| r.category == Category::OO).enumerate() {
            r.e_i = ko[k % ko.len()].0;
            r.e_j = ko[k % ko.len()].1;
        }
        let oo = p * (p - 1) / 2;
        let mut balanced = Vec::new();
        for _ in 0..3 {
            balanced.extend(pairs.iter().filter(|r| r.category == Category::OO).copied());
        }
        balanced.extend(pairs.iter().filter(|r| r.category != Category::OO).copied());
        let _ = oo;
        let fit = compute_pair_weights(&balanced, 1.0).unwrap();
        let prior_ko = (balanced.len() - 3 * 28) as f64 / balanced.len() as f64;
        for (r, w) in balanced.iter().zip(&fit.weights) {
            let expected = if r.category == Category::OO {
                1.0 - prior_ko
            } else {
                prior_ko
            };
            assert!((w - expected).abs() < 0.1, "{w} vs {expected}");
        }
    }

    #[test]
    fn separated_classes_keep_weights_bounded() {
        let d = 20;
        let p = 10;
        let e: Vec<f64> = (0..d)
            .map(|j| {
                if j < p {
                    10.0 + j as f64
                } else {
                    j as f64 * 0.01
                }
            })
            .collect();
        let pairs = records(&e, |_, _| 0.0);
        let fit = compute_pair_weights(&pairs, 1.0).unwrap();
        assert!(fit
            .weights
            .iter()
            .all(|&w| w.is_finite() && (WEIGHT_FLOOR..1.0).contains(&w)));
        let single: Vec<PairRecord> = pairs
            .iter()
            .filter(|r| r.category == Category::OO)
            .copied()
            .collect();
        assert!(matches!(
            compute_pair_weights(&single, 1.0),
            Err(Error::SingleClass(_))
        ));
    }

    fn attribution(e1d: Vec<f64>, e2d: Vec<Vec<f64>>) -> AttributionResult {
        AttributionResult {
            measure: Measure::Expected,
            e1d_signed: e1d.clone(),
            e2d_signed: e2d.clone(),
            e1d,
            e2d,
            settings: AttributionSettings::default(),
        }
    }

    #[test]
    fn distill_counts_and_constant_surface() {
        let e1d = random_e1d(6, 7);
        let attr = attribution(e1d, vec![vec![2.0; 6]; 6]);
        let (gamma, _) = distill(&attr, &DistillConfig::default()).unwrap();
        assert_eq!(gamma.entries.len(), 15 - 3);
        assert!(gamma.entries.iter().all(|e| !e.pair.is_self_pair(3)));
        assert!(gamma.entries.iter().all(|e| e.score.abs() < 1e-6));
        let raw = raw_scores(&attr).unwrap();
        assert_eq!(raw.entries.len(), 12);
        assert!(raw
            .entries
            .iter()
            .all(|e| e.score == 2.0 && e.weight == 1.0));
    }
}
