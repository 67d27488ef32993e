//! Interaction knockoff filter.
//!
//! Pairs are split into original-only (OO) and knockoff-involving (OK, KK).
//! Among pairs scoring at least `t`, the expected number of false OO
//! discoveries is estimated as `#knockoff-involving − 2·#KK` (clamped at 0),
//! and the threshold is the smallest positive score value whose estimated
//! FDP `max(0, K − 2·KK) / max(1, OO)` is at most `q`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{Category, Pair};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreEntry {
    pub pair: Pair,
    pub score: f64,
    pub category: Category,
    /// Regression weight used during distillation (1 for raw scores).
    pub weight: f64,
}

/// Γ: one score per non-self pair of augmented columns.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InteractionScoreSet {
    /// Number of original features.
    pub p: usize,
    pub entries: Vec<ScoreEntry>,
}

impl InteractionScoreSet {
    pub fn validate(&self) -> Result<()> {
        for e in &self.entries {
            if e.pair.i >= e.pair.j || e.pair.j >= 2 * self.p {
                return Err(Error::InvalidArgument(format!("bad pair {:?}", e.pair)));
            }
            if e.pair.is_self_pair(self.p) {
                return Err(Error::InvalidArgument(format!(
                    "self pair {:?} in score set",
                    e.pair
                )));
            }
            if e.category != e.pair.category(self.p) {
                return Err(Error::InvalidArgument(format!(
                    "category mismatch for {:?}",
                    e.pair
                )));
            }
            if !e.score.is_finite() {
                return Err(Error::NonFinite(format!("score of {:?}", e.pair)));
            }
        }
        Ok(())
    }

    pub fn original_only(&self) -> impl Iterator<Item = &ScoreEntry> {
        self.entries.iter().filter(|e| e.category == Category::OO)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    /// `None` when no candidate threshold qualifies (T = +∞).
    pub threshold: Option<f64>,
    /// Selected OO pairs with their scores, by decreasing score.
    pub selected: Vec<(Pair, f64)>,
    /// Minimum target FDR at which each OO pair is selected.
    pub q_values: BTreeMap<Pair, f64>,
    pub estimated_fdp: Option<f64>,
}

impl SelectionResult {
    pub fn selected_pairs(&self) -> Vec<Pair> {
        self.selected.iter().map(|(p, _)| *p).collect()
    }

    /// `{threshold, estimated_fdp, selected: [[i, j, score, qvalue], …]}` with
    /// 1-based indices.
    pub fn to_json(&self) -> serde_json::Value {
        let selected: Vec<serde_json::Value> = self
            .selected
            .iter()
            .map(|(pair, score)| {
                serde_json::json!([
                    pair.i + 1,
                    pair.j + 1,
                    score,
                    self.q_values.get(pair).copied().unwrap_or(1.0)
                ])
            })
            .collect();
        serde_json::json!({
            "threshold": self.threshold,
            "estimated_fdp": self.estimated_fdp,
            "selected": selected,
        })
    }
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "q must be in (0,1), got {q}"
        )))
    }
}

/// Counts of pairs scoring at least `t` for every candidate `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdPoint {
    pub t: f64,
    pub original_only: usize,
    pub knockoff_involving: usize,
    pub knockoff_knockoff: usize,
}

impl ThresholdPoint {
    pub fn ratio(&self) -> f64 {
        let fp = expected_fp_unchecked(self.knockoff_involving, self.knockoff_knockoff);
        fp / self.original_only.max(1) as f64
    }
}

/// Candidate thresholds (unique positive scores) in decreasing order with
/// cumulative class counts.
pub fn threshold_curve(gamma: &InteractionScoreSet) -> Vec<ThresholdPoint> {
    let mut sorted: Vec<&ScoreEntry> = gamma.entries.iter().collect();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut curve = Vec::new();
    let (mut oo, mut k, mut kk) = (0usize, 0usize, 0usize);
    let mut idx = 0;
    while idx < sorted.len() {
        let t = sorted[idx].score;
        if t <= 0.0 {
            break;
        }
        while idx < sorted.len() && sorted[idx].score == t {
            match sorted[idx].category {
                Category::OO => oo += 1,
                Category::OK => k += 1,
                Category::KK => {
                    k += 1;
                    kk += 1
                }
            }
            idx += 1;
        }
        curve.push(ThresholdPoint {
            t,
            original_only: oo,
            knockoff_involving: k,
            knockoff_knockoff: kk,
        });
    }
    curve
}

/// Selects OO pairs scoring at least the smallest qualifying threshold.
pub fn interaction_threshold(gamma: &InteractionScoreSet, q: f64) -> Result<SelectionResult> {
    check_q(q)?;
    if gamma.entries.is_empty() {
        return Err(Error::InvalidArgument("empty score set".into()));
    }
    let curve = threshold_curve(gamma);
    let chosen = curve.iter().rev().find(|pt| pt.ratio() <= q);
    let q_values = q_values(gamma);
    let (threshold, estimated_fdp) = match chosen {
        Some(pt) => (Some(pt.t), Some(pt.ratio())),
        None => (None, None),
    };
    let mut selected: Vec<(Pair, f64)> = match threshold {
        Some(t) => gamma
            .original_only()
            .filter(|e| e.score >= t)
            .map(|e| (e.pair, e.score))
            .collect(),
        None => Vec::new(),
    };
    selected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(SelectionResult {
        threshold,
        selected,
        q_values,
        estimated_fdp,
    })
}

/// Per OO pair, the minimum over candidate thresholds `t ≤ score` of the
/// estimated FDP at `t`, clamped to [0, 1]; 1 when no candidate lies below
/// the score.
pub fn q_values(gamma: &InteractionScoreSet) -> BTreeMap<Pair, f64> {
    let curve = threshold_curve(gamma);
    // ascending t with running minimum of the ratio
    let mut ascending: Vec<(f64, f64)> = Vec::with_capacity(curve.len());
    let mut best = f64::INFINITY;
    for pt in curve.iter().rev() {
        best = best.min(pt.ratio());
        ascending.push((pt.t, best));
    }
    gamma
        .original_only()
        .map(|e| {
            let k = ascending.partition_point(|&(t, _)| t <= e.score);
            let q = if k == 0 {
                1.0
            } else {
                ascending[k - 1].1.clamp(0.0, 1.0)
            };
            (e.pair, q)
        })
        .collect()
}

fn expected_fp_unchecked(knockoff_involving: usize, knockoff_knockoff: usize) -> f64 {
    (knockoff_involving as f64 - 2.0 * knockoff_knockoff as f64).max(0.0)
}

/// Estimated number of false OO discoveries, `max(0, K − 2·KK)`.
///
/// Knockoff-involving pairs split into TC–!TC pairs (one correct target,
/// original:knockoff frequency 1:1) and !TC–!TC pairs (1:3); estimating the
/// latter as `3·KK` and the former as `K − 3·KK` gives
/// `(K − 3·KK)·1 + 3·KK/3 = K − 2·KK`.
pub fn expected_fp(knockoff_involving: usize, knockoff_knockoff: usize) -> Result<f64> {
    if knockoff_knockoff > knockoff_involving {
        return Err(Error::InvalidArgument(format!(
            "KK count {knockoff_knockoff} exceeds knockoff-involving count {knockoff_involving}"
        )));
    }
    Ok(expected_fp_unchecked(knockoff_involving, knockoff_knockoff))
}

/// Knockoff+ ratio `(1 + #{W ≤ −t}) / max(1, #{W ≥ t})` over the candidates
/// `𝒲` (unique nonzero |W|), ascending.
fn univariate_curve(w: &[f64]) -> Vec<(f64, f64)> {
    let mut cands: Vec<f64> = w.iter().map(|v| v.abs()).filter(|&v| v != 0.0).collect();
    cands.sort_by(f64::total_cmp);
    cands.dedup();
    cands
        .into_iter()
        .map(|t| {
            let neg = w.iter().filter(|&&v| v <= -t).count();
            let pos = w.iter().filter(|&&v| v >= t).count();
            (t, (1 + neg) as f64 / pos.max(1) as f64)
        })
        .collect()
}

fn check_w(w: &[f64]) -> Result<()> {
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("knockoff statistic".into()));
    }
    Ok(())
}

/// Univariate knockoff+ threshold; returns `(T, selected 0-based features)`.
pub fn univariate_threshold(w: &[f64], q: f64) -> Result<(Option<f64>, Vec<usize>)> {
    check_q(q)?;
    check_w(w)?;
    let t = univariate_curve(w)
        .into_iter()
        .find(|&(_, r)| r <= q)
        .map(|(t, _)| t);
    let selected = match t {
        Some(t) => (0..w.len()).filter(|&j| w[j] >= t).collect(),
        None => Vec::new(),
    };
    Ok((t, selected))
}

/// Per-feature minimum target level at which the feature is selected by the
/// univariate filter; 1 for `W_j ≤ 0`.
pub fn univariate_q_values(w: &[f64]) -> Result<Vec<f64>> {
    check_w(w)?;
    let curve = univariate_curve(w);
    let mut prefix = Vec::with_capacity(curve.len());
    let mut best = f64::INFINITY;
    for &(t, r) in &curve {
        best = best.min(r);
        prefix.push((t, best));
    }
    Ok(w.iter()
        .map(|&wj| {
            if wj <= 0.0 {
                return 1.0;
            }
            let k = prefix.partition_point(|&(t, _)| t <= wj);
            if k == 0 {
                1.0
            } else {
                prefix[k - 1].1.min(1.0)
            }
        })
        .collect())
}

/// Default antisymmetric contrast `W_j = e_j − e_{j+p}` from a 2p-vector of
/// univariate importances.
pub fn knockoff_statistics(e1d: &[f64]) -> Result<Vec<f64>> {
    if !e1d.len().is_multiple_of(2) {
        return Err(Error::InvalidArgument(
            "univariate importance length must be even".into(),
        ));
    }
    let p = e1d.len() / 2;
    Ok((0..p).map(|j| e1d[j] - e1d[j + p]).collect())
}
