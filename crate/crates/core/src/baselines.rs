//! Comparison procedures: permutation p-values with Benjamini–Hochberg or
//! Benjamini–Yekutieli, and feature-wise aggregation of univariate knockoff
//! q-values.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, AttributionConfig, Measure};
use crate::data::{row_major, Pair};
use crate::error::{Error, Result};
use crate::fdr::{knockoff_statistics, univariate_q_values, univariate_threshold, SelectionResult};
use crate::knockoffs::AugmentedDataset;
use crate::mlp::{train, TrainConfig};
use crate::rng::{self, stage};

pub const MIN_PERMUTATIONS: usize = 19;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMethod {
    PermBh,
    PermBy,
    Featurewise,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "perm-bh" => Ok(BaselineMethod::PermBh),
            "perm-by" => Ok(BaselineMethod::PermBy),
            "featurewise" => Ok(BaselineMethod::Featurewise),
            other => Err(Error::InvalidArgument(format!("unknown baseline method {other:?}"))),
        }
    }
}

/// One p-value per original-only pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PValueTable {
    pub pairs: Vec<Pair>,
    pub p: Vec<f64>,
    /// Observed statistic per pair.
    pub observed: Vec<f64>,
    pub n_permutations: usize,
}

/// Add-one permutation p-values: `(1 + #{null ≥ observed}) / (1 + B)`.
pub fn pvalues_from_statistics(pairs: Vec<Pair>, observed: Vec<f64>, nulls: &[Vec<f64>]) -> Result<PValueTable> {
    if pairs.len() != observed.len() {
        return Err(Error::DimensionMismatch { expected: pairs.len(), got: observed.len() });
    }
    if let Some(bad) = nulls.iter().find(|n| n.len() != observed.len()) {
        return Err(Error::DimensionMismatch { expected: observed.len(), got: bad.len() });
    }
    let b = nulls.len();
    let p = observed
        .iter()
        .enumerate()
        .map(|(k, &obs)| (1 + nulls.iter().filter(|n| n[k] >= obs).count()) as f64 / (1 + b) as f64)
        .collect();
    Ok(PValueTable { pairs, p, observed, n_permutations: b })
}

/// Settings for the permutation baseline; null models reuse the observed
/// model's hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PermutationSettings {
    pub permutations: usize,
    pub train: TrainConfig,
    pub attribution: AttributionConfig,
}

impl Default for PermutationSettings {
    fn default() -> Self {
        PermutationSettings {
            permutations: 99,
            train: TrainConfig { epochs: 50, ..TrainConfig::default() },
            attribution: AttributionConfig { measure: Measure::Expected, draws: 8, grid: 8, max_rows: Some(250) },
        }
    }
}

/// Raw `|e_ij|` for the original-only pairs `i < j < p`.
fn oo_statistic(train_data: &AugmentedDataset, explain: &[f64], s: &PermutationSettings, seed: u64) -> Result<Vec<f64>> {
    let model = train(train_data, &TrainConfig { seed, ..s.train.clone() })?;
    let attr = attribute(&model, explain, &s.attribution, seed)?;
    let p = train_data.p();
    Ok((0..p).flat_map(|i| (i + 1..p).map(move |j| (i, j))).map(|(i, j)| attr.e2d[i][j]).collect())
}

/// Trains on `train_data` and on `B` response permutations of it, explaining
/// the rows of `explain` each time.
///
/// Replicate `b` uses seed `seed + b + 1` both for the permutation stream
/// `(·, RESPONSE_PERMUTATION, 0)` and for training; a failure reports that
/// seed.
pub fn permutation_pvalues(
    train_data: &AugmentedDataset,
    explain: &AugmentedDataset,
    settings: &PermutationSettings,
    seed: u64,
) -> Result<PValueTable> {
    if settings.permutations < MIN_PERMUTATIONS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_PERMUTATIONS} permutations, got {}",
            settings.permutations
        )));
    }
    if explain.p() != train_data.p() {
        return Err(Error::DimensionMismatch { expected: train_data.p(), got: explain.p() });
    }
    let rows = row_major(&explain.columns);
    let observed = oo_statistic(train_data, &rows, settings, seed).map_err(|e| Error::Replicate { seed, source: Box::new(e) })?;
    let nulls: Vec<Vec<f64>> = (0..settings.permutations)
        .into_par_iter()
        .map(|b| {
            let rep_seed = seed.wrapping_add(b as u64 + 1);
            let mut permuted = train_data.clone();
            permuted.response.shuffle(&mut rng::stream(rep_seed, stage::RESPONSE_PERMUTATION, 0));
            oo_statistic(&permuted, &rows, settings, rep_seed).map_err(|e| Error::Replicate { seed: rep_seed, source: Box::new(e) })
        })
        .collect::<Result<_>>()?;
    let p = train_data.p();
    let pairs = (0..p).flat_map(|i| (i + 1..p).map(move |j| Pair::new(i, j))).collect();
    pvalues_from_statistics(pairs, observed, &nulls)
}

fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("q must be in (0,1), got {q}")))
    }
}

/// Number of rejections of the step-up rule `p₍ₖ₎ ≤ k·level/m`.
fn step_up_count(p: &[f64], level: f64) -> usize {
    let m = p.len();
    let mut sorted = p.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..=m).rev().find(|&k| sorted[k - 1] <= k as f64 * level / m as f64).unwrap_or(0)
}

fn step_up_select(table: &PValueTable, level: f64) -> Vec<Pair> {
    let k = step_up_count(&table.p, level);
    if k == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..table.p.len()).collect();
    order.sort_by(|&a, &b| table.p[a].total_cmp(&table.p[b]).then(a.cmp(&b)));
    let cutoff = table.p[order[k - 1]];
    // ties at the cutoff all pass the same comparison
    let mut out: Vec<Pair> = (0..table.p.len()).filter(|&i| table.p[i] <= cutoff).map(|i| table.pairs[i]).collect();
    out.sort();
    out
}

pub fn harmonic(m: usize) -> f64 {
    (1..=m).map(|k| 1.0 / k as f64).sum()
}

/// Benjamini–Hochberg step-up at level `q`.
pub fn bh_select(table: &PValueTable, q: f64) -> Result<Vec<Pair>> {
    check_q(q)?;
    Ok(step_up_select(table, q))
}

/// Benjamini–Yekutieli: BH at `q / H_m`.
pub fn by_select(table: &PValueTable, q: f64) -> Result<Vec<Pair>> {
    check_q(q)?;
    Ok(step_up_select(table, q / harmonic(table.p.len())))
}

/// Step-up adjusted p-values `min_{k ≥ rank} (m·c/k)·p₍ₖ₎`, capped at 1, with
/// `c = 1` for BH and `c = H_m` for BY.
pub fn adjusted_pvalues(p: &[f64], dependent: bool) -> Vec<f64> {
    let m = p.len();
    let c = if dependent { harmonic(m) } else { 1.0 };
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    let mut out = vec![1.0; m];
    let mut running = 1.0f64;
    for rank in (1..=m).rev() {
        let i = order[rank - 1];
        running = running.min(p[i] * m as f64 * c / rank as f64);
        out[i] = running.min(1.0);
    }
    out
}

/// BH or BY selection in the common selection format. Scores are the
/// observed statistics; q-values are the adjusted p-values.
pub fn step_up_selection(table: &PValueTable, q: f64, dependent: bool) -> Result<SelectionResult> {
    let selected = if dependent { by_select(table, q)? } else { bh_select(table, q)? };
    let adjusted = adjusted_pvalues(&table.p, dependent);
    let index: BTreeMap<Pair, usize> = table.pairs.iter().enumerate().map(|(k, &p)| (p, k)).collect();
    let mut chosen: Vec<(Pair, f64)> = selected.iter().map(|p| (*p, table.observed[index[p]])).collect();
    chosen.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let threshold = selected.iter().map(|p| table.p[index[p]]).max_by(f64::total_cmp);
    Ok(SelectionResult {
        threshold,
        selected: chosen,
        q_values: table.pairs.iter().copied().zip(adjusted).collect(),
        estimated_fdp: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturewiseResult {
    pub w: Vec<f64>,
    pub feature_q: Vec<f64>,
    /// Pair q-value `max(q_i, q_j)` for every original pair.
    pub pair_q: BTreeMap<Pair, f64>,
    pub selected: Vec<Pair>,
    pub threshold: Option<f64>,
}

/// Feature-wise aggregation: `W_j = e1d_j − e1d_{j+p}`, per-feature knockoff+
/// q-values, pair q = the larger of the two.
pub fn featurewise_aggregation(e1d: &[f64], q: f64) -> Result<FeaturewiseResult> {
    check_q(q)?;
    let w = knockoff_statistics(e1d)?;
    let feature_q = univariate_q_values(&w)?;
    let (threshold, _) = univariate_threshold(&w, q)?;
    let p = w.len();
    let mut pair_q = BTreeMap::new();
    let mut selected = Vec::new();
    for i in 0..p {
        for j in i + 1..p {
            let v = feature_q[i].max(feature_q[j]);
            pair_q.insert(Pair::new(i, j), v);
            if v <= q {
                selected.push(Pair::new(i, j));
            }
        }
    }
    Ok(FeaturewiseResult { w, feature_q, pair_q, selected, threshold })
}

/// Feature-wise selection in the common selection format, scored by the
/// given raw pair importance `e2d`.
pub fn featurewise_selection(e1d: &[f64], e2d: &[Vec<f64>], q: f64) -> Result<SelectionResult> {
    let res = featurewise_aggregation(e1d, q)?;
    let mut selected: Vec<(Pair, f64)> = res.selected.iter().map(|p| (*p, e2d[p.i][p.j])).collect();
    selected.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(SelectionResult { threshold: res.threshold, selected, q_values: res.pair_q, estimated_fdp: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(p: &[f64]) -> PValueTable {
        let pairs = (0..p.len()).map(|k| Pair::new(k, k + 100)).collect();
        PValueTable { pairs, p: p.to_vec(), observed: vec![0.0; p.len()], n_permutations: 99 }
    }

    #[test]
    fn bh_and_by_examples() {
        let t = table(&[0.01, 0.02, 0.50, 0.90]);
        assert_eq!(bh_select(&t, 0.1).unwrap().len(), 2);
        assert_eq!(by_select(&t, 0.1).unwrap().len(), 2);
        assert!((harmonic(4) - 2.083333333).abs() < 1e-8);
        assert!(bh_select(&table(&[1.0; 5]), 0.1).unwrap().is_empty());
        assert_eq!(bh_select(&table(&[0.1]), 0.1).unwrap().len(), 1);
        let single = table(&[0.07]);
        assert_eq!(bh_select(&single, 0.1).unwrap(), by_select(&single, 0.1).unwrap());
        assert!(bh_select(&t, 1.0).is_err());
    }

    #[test]
    fn add_one_pvalues() {
        let obs = vec![10.0, 0.5];
        let nulls: Vec<Vec<f64>> = (0..19).map(|b| vec![b as f64 * 0.1, b as f64 / 18.0]).collect();
        let t = pvalues_from_statistics(vec![Pair::new(0, 1), Pair::new(0, 2)], obs, &nulls).unwrap();
        assert_eq!(t.p[0], 1.0 / 20.0);
        // 0.5 is the median of 19 evenly spaced nulls: 10 of them are ≥ it
        assert!((t.p[1] - 0.55).abs() <= 1.0 / 20.0);
    }

    #[test]
    fn adjusted_pvalues_reproduce_selections() {
        let p = [0.001, 0.008, 0.039, 0.041, 0.042, 0.06, 0.074, 0.205, 0.212, 0.216];
        let t = table(&p);
        for &q in &[0.01, 0.05, 0.1, 0.2] {
            for dependent in [false, true] {
                let adj = adjusted_pvalues(&p, dependent);
                let by_adj = adj.iter().filter(|&&a| a <= q).count();
                let direct = if dependent { by_select(&t, q) } else { bh_select(&t, q) }.unwrap().len();
                assert_eq!(by_adj, direct, "q {q} dependent {dependent}");
            }
        }
    }

    #[test]
    fn featurewise_example() {
        // W = (5, 4, 3, −1, 0.5, −0.5) realized as e1d originals minus knockoffs
        let w = [5.0, 4.0, 3.0, -1.0, 0.5, -0.5];
        let mut e1d = vec![1.0; 12];
        for (j, &v) in w.iter().enumerate() {
            if v > 0.0 {
                e1d[j] += v;
            } else {
                e1d[j + 6] -= v;
            }
        }
        let res = featurewise_aggregation(&e1d, 0.34).unwrap();
        for j in 0..3 {
            assert!(res.feature_q[j] <= 0.34);
        }
        assert!(res.pair_q[&Pair::new(0, 1)] <= 0.34);
        assert_eq!(res.pair_q[&Pair::new(0, 3)], 1.0);
        assert_eq!(res.pair_q[&Pair::new(3, 5)], 1.0);
        assert!(res.selected.contains(&Pair::new(1, 2)));
        assert_eq!(res.threshold, Some(3.0));
    }

    #[test]
    fn method_names_parse() {
        assert_eq!("perm-bh".parse::<BaselineMethod>().unwrap(), BaselineMethod::PermBh);
        assert_eq!("featurewise".parse::<BaselineMethod>().unwrap(), BaselineMethod::Featurewise);
        assert!("bh".parse::<BaselineMethod>().is_err());
    }
}
