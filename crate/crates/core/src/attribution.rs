//! Univariate and pairwise importance over the 2p augmented columns.
//!
//! Three measures are provided:
//!
//! * Expected Gradient / Hessian: Monte Carlo over `α, β ~ U(0,1)` and a
//!   baseline row `x′` drawn from the baseline set,
//!   `(x_i−x′_i)(x_j−x′_j)·αβ·∂²f(x′+αβ(x−x′))` and
//!   `(x_i−x′_i)·α·∂_i f(x′+α(x−x′))`, averaged over draws and summed over
//!   explained rows;
//! * Integrated Gradient / Hessian: the same path integrals on a midpoint
//!   grid, averaged over baselines and summed over explained rows;
//! * a weight-based measure specific to [`CouplingMlp`].
//!
//! Aggregates are symmetrized and reported as absolute values; the signed
//! aggregates are kept alongside.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::CouplingMlp;
use crate::rng::{self, stage};

/// Rows per parallel work unit; partial sums are reduced in row order.
const CHUNK_ROWS: usize = 16;

/// A scalar function of a real vector with exact first and second
/// derivatives.
pub trait Differentiable: Sync {
    fn input_dim(&self) -> usize;

    fn value(&self, x: &[f64]) -> f64;

    /// Writes ∇f(x) into `out` and returns f(x).
    fn gradient(&self, x: &[f64], out: &mut [f64]) -> f64;

    /// Writes ∇²f(x) (row-major d × d) into `out`.
    fn hessian(&self, x: &[f64], out: &mut [f64]);
}

impl Differentiable for CouplingMlp {
    fn input_dim(&self) -> usize {
        2 * self.p
    }

    fn value(&self, x: &[f64]) -> f64 {
        self.coupling_gradient(x).0
    }

    fn gradient(&self, x: &[f64], out: &mut [f64]) -> f64 {
        self.gradient_into(x, out)
    }

    fn hessian(&self, x: &[f64], out: &mut [f64]) {
        let p = self.p;
        let d = 2 * p;
        let hf = self.coupling_hessian(x);
        for a in 0..d {
            let ca = if a < p {
                self.z[a]
            } else {
                self.z_tilde[a - p]
            };
            let hrow = &hf[(a % p) * p..(a % p + 1) * p];
            let orow = &mut out[a * d..(a + 1) * d];
            for j in 0..p {
                orow[j] = ca * self.z[j] * hrow[j];
                orow[j + p] = ca * self.z_tilde[j] * hrow[j];
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measure {
    Expected,
    Integrated,
    ModelSpecific,
}

impl std::str::FromStr for Measure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expected" => Ok(Measure::Expected),
            "integrated" => Ok(Measure::Integrated),
            "model-specific" | "model_specific" => Ok(Measure::ModelSpecific),
            other => Err(Error::InvalidArgument(format!("unknown measure {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttributionSettings {
    pub n_samples_explained: usize,
    pub n_baselines: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub draws: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub measure: Measure,
    /// |E¹ᴰ|, length 2p.
    pub e1d: Vec<f64>,
    /// |(E²ᴰ + E²ᴰᵀ)/2|, 2p × 2p.
    pub e2d: Vec<Vec<f64>>,
    pub e1d_signed: Vec<f64>,
    pub e2d_signed: Vec<Vec<f64>>,
    pub settings: AttributionSettings,
}

impl AttributionResult {
    fn from_signed(
        measure: Measure,
        e1d: Vec<f64>,
        e2d: &[f64],
        settings: AttributionSettings,
    ) -> Result<Self> {
        let d = e1d.len();
        if e1d.iter().chain(e2d).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(
                "attribution aggregate (model output not finite)".into(),
            ));
        }
        let signed: Vec<Vec<f64>> = (0..d)
            .map(|a| {
                (0..d)
                    .map(|b| 0.5 * (e2d[a * d + b] + e2d[b * d + a]))
                    .collect()
            })
            .collect();
        Ok(AttributionResult {
            measure,
            e1d: e1d.iter().map(|v| v.abs()).collect(),
            e2d: signed
                .iter()
                .map(|r| r.iter().map(|v| v.abs()).collect())
                .collect(),
            e1d_signed: e1d,
            e2d_signed: signed,
            settings,
        })
    }

    /// Width of the augmented input (2p).
    pub fn dim(&self) -> usize {
        self.e1d.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if d == 0 || !d.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "attribution width {d} is not a positive even number"
            )));
        }
        if self.e2d.len() != d || self.e2d.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: self.e2d.len(),
            });
        }
        if self
            .e1d
            .iter()
            .chain(self.e2d.iter().flatten())
            .any(|v| !v.is_finite())
        {
            return Err(Error::NonFinite("attribution".into()));
        }
        Ok(())
    }
}

fn check_inputs(model: &impl Differentiable, explain: &[f64], baselines: &[f64]) -> Result<usize> {
    let d = model.input_dim();
    if d == 0 || !explain.len().is_multiple_of(d) || !baselines.len().is_multiple_of(d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            got: explain.len() % d.max(1),
        });
    }
    if baselines.is_empty() {
        return Err(Error::InvalidArgument("baseline set is empty".into()));
    }
    if explain.is_empty() {
        return Err(Error::InvalidArgument("no rows to explain".into()));
    }
    Ok(d)
}

/// Accumulates `scale · v_a v_b H_ab` into the upper triangle of `acc`.
#[inline]
fn accumulate_upper(acc: &mut [f64], hess: &[f64], v: &[f64], scale: f64) {
    let d = v.len();
    for a in 0..d {
        let va = scale * v[a];
        if va == 0.0 {
            continue;
        }
        let hrow = &hess[a * d + a..(a + 1) * d];
        let arow = &mut acc[a * d + a..(a + 1) * d];
        for ((o, &h), &vb) in arow.iter_mut().zip(hrow).zip(&v[a..]) {
            *o += va * vb * h;
        }
    }
}

fn mirror_upper(acc: &mut [f64], d: usize) {
    for a in 0..d {
        for b in 0..a {
            acc[a * d + b] = acc[b * d + a];
        }
    }
}

/// Parallel map over row chunks with an in-order sum of the partial results.
fn sum_over_rows<F>(m: usize, d: usize, per_row: F) -> (Vec<f64>, Vec<f64>)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync,
{
    let chunks: Vec<(Vec<f64>, Vec<f64>)> = (0..m.div_ceil(CHUNK_ROWS))
        .into_par_iter()
        .map(|c| {
            let mut e1 = vec![0.0; d];
            let mut e2 = vec![0.0; d * d];
            for r in c * CHUNK_ROWS..((c + 1) * CHUNK_ROWS).min(m) {
                per_row(r, &mut e1, &mut e2);
            }
            (e1, e2)
        })
        .collect();
    let mut e1 = vec![0.0; d];
    let mut e2 = vec![0.0; d * d];
    for (c1, c2) in chunks {
        e1.iter_mut().zip(&c1).for_each(|(a, b)| *a += b);
        e2.iter_mut().zip(&c2).for_each(|(a, b)| *a += b);
    }
    mirror_upper(&mut e2, d);
    (e1, e2)
}

/// Measure and settings used by the pipeline and CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub measure: Measure,
    /// Monte Carlo draws per explained row (expected measure).
    pub draws: usize,
    /// Quadrature points per axis (integrated measure).
    pub grid: usize,
    /// Explain at most this many rows (the first ones); `None` explains all.
    pub max_rows: Option<usize>,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            measure: Measure::Expected,
            draws: 128,
            grid: 16,
            max_rows: None,
        }
    }
}

/// Attributions of `model` on the rows of `explain` (row-major, `2p` wide).
///
/// The expected measure uses the explained rows as baselines. The integrated
/// measure integrates from the column mean of the explained rows, which keeps
/// its cost at `grid²` Hessians per row.
pub fn attribute(
    model: &CouplingMlp,
    explain: &[f64],
    cfg: &AttributionConfig,
    seed: u64,
) -> Result<AttributionResult> {
    let d = model.input_dim();
    let rows = explain.len() / d.max(1);
    let m = cfg.max_rows.map_or(rows, |k| k.min(rows));
    let explain = &explain[..m * d];
    match cfg.measure {
        Measure::Expected => expected_attributions(model, explain, explain, cfg.draws, seed),
        Measure::Integrated => {
            let mut mean = vec![0.0; d];
            for row in explain.chunks(d) {
                mean.iter_mut().zip(row).for_each(|(a, b)| *a += b / m as f64);
            }
            integrated_attributions(model, explain, &mean, cfg.grid)
        }
        Measure::ModelSpecific => model_specific_attributions(model),
    }
}

/// Expected Gradient / Expected Hessian.
///
/// `explain` and `baselines` are row-major with `2p` columns. Row `r` draws
/// `(α, β, baseline index)` per draw from stream `(seed, ATTRIBUTION, r)`.
pub fn expected_attributions(
    model: &impl Differentiable,
    explain: &[f64],
    baselines: &[f64],
    draws: usize,
    seed: u64,
) -> Result<AttributionResult> {
    if draws == 0 {
        return Err(Error::InvalidArgument("draws must be at least 1".into()));
    }
    let d = check_inputs(model, explain, baselines)?;
    let m = explain.len() / d;
    let k = baselines.len() / d;
    let inv_draws = 1.0 / draws as f64;
    let (e1d, e2d) = sum_over_rows(m, d, |r, e1, e2| {
        let x = &explain[r * d..(r + 1) * d];
        let mut rng = rng::stream(seed, stage::ATTRIBUTION, r as u32);
        let mut diff = vec![0.0; d];
        let mut point = vec![0.0; d];
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for _ in 0..draws {
            let alpha: f64 = rng.random();
            let beta: f64 = rng.random();
            let b = rng.random_range(0..k);
            let base = &baselines[b * d..(b + 1) * d];
            for i in 0..d {
                diff[i] = x[i] - base[i];
            }
            let ab = alpha * beta;
            for i in 0..d {
                point[i] = base[i] + ab * diff[i];
            }
            model.hessian(&point, &mut hess);
            accumulate_upper(e2, &hess, &diff, ab * inv_draws);
            for i in 0..d {
                point[i] = base[i] + alpha * diff[i];
            }
            model.gradient(&point, &mut grad);
            for i in 0..d {
                e1[i] += diff[i] * alpha * grad[i] * inv_draws;
            }
        }
    });
    let settings = AttributionSettings {
        n_samples_explained: m,
        n_baselines: k,
        draws: Some(draws),
        grid: None,
        seed: Some(seed),
    };
    AttributionResult::from_signed(Measure::Expected, e1d, &e2d, settings)
}

/// Integrated Gradient / Integrated Hessian on a `grid × grid` midpoint rule
/// (`grid` points for the gradient path).
pub fn integrated_attributions(
    model: &impl Differentiable,
    explain: &[f64],
    baselines: &[f64],
    grid: usize,
) -> Result<AttributionResult> {
    if grid < 2 {
        return Err(Error::InvalidArgument("grid must be at least 2".into()));
    }
    let d = check_inputs(model, explain, baselines)?;
    let m = explain.len() / d;
    let k = baselines.len() / d;
    let nodes: Vec<f64> = (0..grid).map(|i| (i as f64 + 0.5) / grid as f64).collect();
    let w1 = 1.0 / (grid * k) as f64;
    let w2 = 1.0 / ((grid * grid) * k) as f64;
    let (e1d, e2d) = sum_over_rows(m, d, |r, e1, e2| {
        let x = &explain[r * d..(r + 1) * d];
        let mut diff = vec![0.0; d];
        let mut point = vec![0.0; d];
        let mut grad = vec![0.0; d];
        let mut hess = vec![0.0; d * d];
        for b in 0..k {
            let base = &baselines[b * d..(b + 1) * d];
            for i in 0..d {
                diff[i] = x[i] - base[i];
            }
            // (α_a, β_b) and (α_b, β_a) hit the same path point
            for a in 0..grid {
                for bb in a..grid {
                    let ab = nodes[a] * nodes[bb];
                    let mult = if a == bb { 1.0 } else { 2.0 };
                    for i in 0..d {
                        point[i] = base[i] + ab * diff[i];
                    }
                    model.hessian(&point, &mut hess);
                    accumulate_upper(e2, &hess, &diff, mult * ab * w2);
                }
            }
            for &alpha in &nodes {
                for i in 0..d {
                    point[i] = base[i] + alpha * diff[i];
                }
                model.gradient(&point, &mut grad);
                for i in 0..d {
                    e1[i] += diff[i] * grad[i] * w1;
                }
            }
        }
    });
    let settings = AttributionSettings {
        n_samples_explained: m,
        n_baselines: k,
        draws: None,
        grid: Some(grid),
        seed: None,
    };
    AttributionResult::from_signed(Measure::Integrated, e1d, &e2d, settings)
}

/// Weight-based importance of a trained [`CouplingMlp`]:
///
/// `W^Agg = W⁽¹⁾⋯W⁽ᴸ⁾`, `e²ᴰ_ij = Σ_k Z^Agg_i W⁽⁰⁾_{i mod p,k} Z^Agg_j W⁽⁰⁾_{j mod p,k} W^Agg_k`,
/// `e¹ᴰ_j = Z^Agg_j (W⁽⁰⁾ W^Agg)_{j mod p}` with `Z^Agg = (Z, Z̃)`.
pub fn model_specific_attributions(model: &CouplingMlp) -> Result<AttributionResult> {
    model.validate()?;
    let p = model.p;
    let d = 2 * p;
    let first = &model.layers[0];
    let p1 = first.fan_out;
    // fold the product from the output layer backwards
    let mut agg = vec![1.0];
    for layer in model.layers[1..].iter().rev() {
        let mut next = vec![0.0; layer.fan_in];
        for (i, n) in next.iter_mut().enumerate() {
            *n = (0..layer.fan_out).map(|k| layer.w(i, k) * agg[k]).sum();
        }
        agg = next;
    }
    debug_assert_eq!(agg.len(), p1);
    let z_agg: Vec<f64> = model.z.iter().chain(&model.z_tilde).copied().collect();
    let w1d: Vec<f64> = (0..p)
        .map(|j| (0..p1).map(|k| first.w(j, k) * agg[k]).sum())
        .collect();
    let e1d: Vec<f64> = (0..d).map(|j| z_agg[j] * w1d[j % p]).collect();
    let mut e2d = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            e2d[i * d + j] = z_agg[i]
                * z_agg[j]
                * (0..p1)
                    .map(|k| first.w(i % p, k) * first.w(j % p, k) * agg[k])
                    .sum::<f64>();
        }
    }
    let settings = AttributionSettings::default();
    AttributionResult::from_signed(Measure::ModelSpecific, e1d, &e2d, settings)
}
