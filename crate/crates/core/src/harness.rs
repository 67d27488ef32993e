//! Seeded end-to-end runs: data → knockoffs → model → attribution →
//! distillation → selection, scored against ground truth when it exists.
//!
//! Repetition `r` uses seed `base_seed + r` for every stage and writes its
//! intermediates to `rep_{r:03}/` under the output directory. The run
//! summary holds no timings, so identical configurations give byte-identical
//! `summary.json`; per-stage runtimes go to `timings.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribution::{attribute, AttributionConfig, AttributionResult};
use crate::baselines::{featurewise_selection, permutation_pvalues, step_up_selection, BaselineMethod, PermutationSettings};
use crate::data::{row_major, Category, Dataset, Pair, Task};
use crate::distill::{distill, raw_scores, DistillConfig, FitDiagnostics};
use crate::error::{Error, Result};
use crate::fdr::{interaction_threshold, q_values, InteractionScoreSet, SelectionResult};
use crate::io;
use crate::knockoffs::{self, AugmentedDataset, DiagnosticsReport, KnockoffMethod};
use crate::linalg::ks_two_sample;
use crate::mlp::{self, TrainConfig};
use crate::rng::{self, stage};
use crate::sim::{generate_dataset, GroundTruth, SimulationSpec};

pub const SUMMARY_SCHEMA: &str = "kointeract-summary/v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Simulation {
        function_id: u8,
        n_samples: usize,
        n_features: usize,
    },
    Csv {
        path: PathBuf,
        response: String,
        #[serde(default)]
        categorical: Vec<String>,
        #[serde(default = "default_true")]
        standardize: bool,
        #[serde(default)]
        task: Task,
        /// Optional `{"pairs": [[i, j], …]}` file, 1-based feature indices.
        #[serde(default)]
        truth: Option<PathBuf>,
    },
}

fn default_true() -> bool {
    true
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Simulation { function_id: 1, n_samples: 4000, n_features: 30 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnockoffConfig {
    pub method: KnockoffMethod,
    /// Covariance shrinkage toward the diagonal; default depends on n/p.
    pub shrinkage: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub methods: Vec<BaselineMethod>,
    pub permutation: PermutationSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub data: DataSource,
    pub knockoffs: KnockoffConfig,
    pub train: TrainConfig,
    /// Z-score a regression response (with training-split moments) before
    /// fitting the model.
    pub standardize_response: bool,
    /// Tail fraction clamped on each side of a regression response before
    /// standardizing; 0 disables.
    pub winsorize_response: f64,
    pub attribution: AttributionConfig,
    /// Select on distilled scores; when false the raw pairwise importance is
    /// filtered directly.
    pub distill: bool,
    pub distillation: DistillConfig,
    pub q: f64,
    pub repetitions: usize,
    pub base_seed: u64,
    /// Concurrent repetitions; 0 uses every core.
    pub workers: usize,
    pub output_dir: Option<PathBuf>,
    pub baselines: BaselineConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            data: DataSource::default(),
            knockoffs: KnockoffConfig::default(),
            train: TrainConfig::default(),
            standardize_response: true,
            winsorize_response: 0.05,
            attribution: AttributionConfig::default(),
            distill: true,
            distillation: DistillConfig::default(),
            q: 0.2,
            repetitions: 1,
            base_seed: 0,
            workers: 1,
            output_dir: None,
            baselines: BaselineConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.repetitions == 0 {
            return bad("repetitions must be at least 1".into());
        }
        if !(self.q > 0.0 && self.q < 1.0) {
            return bad(format!("q must be in (0,1), got {}", self.q));
        }
        if !(0.0..0.5).contains(&self.winsorize_response) {
            return bad(format!("winsorize_response must be in [0, 0.5), got {}", self.winsorize_response));
        }
        self.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.baselines.permutation.train.validate().map_err(|e| Error::Config(e.to_string()))?;
        for a in [&self.attribution, &self.baselines.permutation.attribution] {
            if a.draws == 0 || a.grid < 2 || a.max_rows == Some(0) {
                return bad("attribution needs draws ≥ 1, grid ≥ 2 and max_rows ≥ 1".into());
            }
        }
        if let Some(s) = self.knockoffs.shrinkage {
            if !(0.0..=1.0).contains(&s) {
                return bad(format!("shrinkage must be in [0,1], got {s}"));
            }
        }
        let uses_permutation =
            self.baselines.methods.iter().any(|m| matches!(m, BaselineMethod::PermBh | BaselineMethod::PermBy));
        if uses_permutation && self.baselines.permutation.permutations < crate::baselines::MIN_PERMUTATIONS {
            return bad(format!("permutation baseline needs at least {} permutations", crate::baselines::MIN_PERMUTATIONS));
        }
        match &self.data {
            DataSource::Simulation { function_id, n_samples, n_features } => {
                SimulationSpec { function_id: *function_id, n_samples: *n_samples, n_features: *n_features, seed: 0 }
                    .validate()
                    .map_err(|e| Error::Config(e.to_string()))?;
                if *n_samples < 40 {
                    return bad("n_samples must be at least 40".into());
                }
            }
            DataSource::Csv { path, truth, .. } => {
                if !path.is_file() {
                    return bad(format!("data file {} does not exist", path.display()));
                }
                if let Some(t) = truth {
                    if !t.is_file() {
                        return bad(format!("truth file {} does not exist", t.display()));
                    }
                }
            }
        }
        Ok(())
    }

    /// The configuration as recorded in the summary: everything that affects
    /// results, nothing that only affects where or how fast they are made.
    fn recorded(&self) -> PipelineConfig {
        PipelineConfig { workers: 0, output_dir: None, ..self.clone() }
    }
}

/// Selection outcome of one procedure in one repetition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub threshold: Option<f64>,
    pub estimated_fdp: Option<f64>,
    /// Selected original feature pairs, 1-based.
    pub selected: Vec<[usize; 2]>,
    pub fdp: Option<f64>,
    pub power: Option<f64>,
    pub auroc: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionReport {
    pub index: usize,
    pub seed: u64,
    pub status: RepStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<RepetitionDetail>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RepetitionDetail {
    pub n_train: usize,
    pub n_test: usize,
    pub epochs_run: usize,
    /// R² on the test split (regression only).
    pub test_r2: Option<f64>,
    pub knockoff_diagnostics: DiagnosticsReport,
    /// The reported procedure (distilled unless distillation is off).
    pub selection: SelectionSummary,
    /// The same filter on undistilled pairwise importance.
    pub raw_selection: SelectionSummary,
    pub distill_fit: Option<FitDiagnostics>,
    /// KS distance between null OO scores and knockoff-involving scores,
    /// before and after distillation.
    pub ks_before: Option<f64>,
    pub ks_after: Option<f64>,
    pub baselines: BTreeMap<String, SelectionSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub completed: usize,
    pub fdp: MetricSummary,
    pub power: MetricSummary,
    pub auroc: Option<MetricSummary>,
    pub raw_fdp: MetricSummary,
    pub raw_power: MetricSummary,
    pub baselines: BTreeMap<String, BTreeMap<String, MetricSummary>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: String,
    pub config: PipelineConfig,
    pub feature_names: Vec<String>,
    /// Ground-truth pairs, 1-based, when known.
    pub truth: Option<Vec<[usize; 2]>>,
    pub repetitions: Vec<RepetitionReport>,
    pub metrics: Option<MetricsReport>,
}

impl RunSummary {
    pub fn completed(&self) -> impl Iterator<Item = &RepetitionDetail> {
        self.repetitions.iter().filter_map(|r| r.detail.as_ref())
    }

    pub fn failures(&self) -> usize {
        self.repetitions.iter().filter(|r| r.status == RepStatus::Failed).count()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub data: f64,
    pub knockoffs: f64,
    pub train: f64,
    pub attribute: f64,
    pub distill: f64,
    pub select: f64,
    pub baselines: f64,
}

/// `(FDP, power)` of a selection of 0-based original pairs against 1-based
/// truth; an empty selection has FDP 0.
pub fn metrics(selected: &[Pair], truth: &GroundTruth) -> (f64, f64) {
    let tp = selected.iter().filter(|p| truth.contains(p.i + 1, p.j + 1)).count();
    let fdp = if selected.is_empty() { 0.0 } else { (selected.len() - tp) as f64 / selected.len() as f64 };
    let power = if truth.is_empty() { 0.0 } else { tp as f64 / truth.len() as f64 };
    (fdp, power)
}

/// Mann–Whitney AUROC: fraction of (positive, negative) pairs ordered
/// correctly, ties counted one half.
pub fn auroc(scores: &[(Pair, f64)], truth: &GroundTruth) -> Result<f64> {
    let (pos, neg): (Vec<_>, Vec<_>) = scores.iter().partition(|(p, _)| truth.contains(p.i + 1, p.j + 1));
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::SingleClass("AUROC needs positive and negative pairs".into()));
    }
    let mut wins = 0.0;
    for (_, a) in &pos {
        for (_, b) in &neg {
            wins += if a > b {
                1.0
            } else if a == b {
                0.5
            } else {
                0.0
            };
        }
    }
    Ok(wins / (pos.len() * neg.len()) as f64)
}

/// Mean with a normal-approximation 95% interval.
pub fn summarize(values: &[f64]) -> MetricSummary {
    let n = values.len();
    let mean = if n == 0 { 0.0 } else { values.iter().sum::<f64>() / n as f64 };
    let half = if n < 2 {
        0.0
    } else {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    };
    MetricSummary { values: values.to_vec(), mean, ci_low: mean - half, ci_high: mean + half }
}

/// Reads a CSV into a dataset.
///
/// Columns named in `categorical` are expanded into one indicator column per
/// level (`name=level`, levels sorted). Numeric features are z-scored when
/// `standardize` is set; indicators are left as 0/1. Missing cells (empty,
/// `NA`, `NaN`) abort with the offending 1-based data rows.
pub fn ingest_csv(path: &Path, response: &str, categorical: &[String], standardize: bool, task: Task) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path)?;
    let header: Vec<String> = reader.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let yc = header
        .iter()
        .position(|h| h == response)
        .ok_or_else(|| Error::Parse(format!("{}: no response column {response:?}", path.display())))?;
    for c in categorical {
        if !header.contains(c) {
            return Err(Error::Parse(format!("{}: no categorical column {c:?}", path.display())));
        }
        if c == response {
            return Err(Error::Parse("the response cannot be categorical".into()));
        }
    }
    let mut cells: Vec<Vec<String>> = Vec::new();
    let mut missing = Vec::new();
    for (row, rec) in reader.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(Error::Parse(format!("{}: row {} has {} fields", path.display(), row + 1, rec.len())));
        }
        let values: Vec<String> = rec.iter().map(|s| s.trim().to_string()).collect();
        if values.iter().any(|v| io::is_missing(v)) {
            missing.push(row + 1);
        }
        cells.push(values);
    }
    if !missing.is_empty() {
        return Err(Error::MissingValues { rows: missing });
    }
    let n = cells.len();
    let parse = |row: usize, c: usize| -> Result<f64> {
        cells[row][c].parse::<f64>().map_err(|_| {
            Error::Parse(format!("{}: row {} column {:?}: {:?} is not a number", path.display(), row + 1, header[c], cells[row][c]))
        })
    };
    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    for (c, name) in header.iter().enumerate() {
        if c == yc {
            continue;
        }
        if categorical.contains(name) {
            let levels: std::collections::BTreeSet<&str> = cells.iter().map(|r| r[c].as_str()).collect();
            for level in levels {
                names.push(format!("{name}={level}"));
                columns.push(cells.iter().map(|r| (r[c] == level) as u8 as f64).collect());
            }
        } else {
            let mut col = (0..n).map(|r| parse(r, c)).collect::<Result<Vec<f64>>>()?;
            if standardize {
                let mean = col.iter().sum::<f64>() / n as f64;
                let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0)).sqrt();
                if !(sd > 0.0) {
                    return Err(Error::InvalidArgument(format!("column {name:?} is constant and cannot be standardized")));
                }
                col.iter_mut().for_each(|v| *v = (*v - mean) / sd);
            }
            names.push(name.clone());
            columns.push(col);
        }
    }
    let y = (0..n).map(|r| parse(r, yc)).collect::<Result<Vec<f64>>>()?;
    if task == Task::Binary && y.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Parse("binary response must be coded 0/1".into()));
    }
    let x = DMatrix::from_fn(n, columns.len(), |r, c| columns[c][r]);
    Dataset::new(names, x, y, task)
}

fn pairs_1based(pairs: &[Pair]) -> Vec<[usize; 2]> {
    pairs.iter().map(|p| [p.i + 1, p.j + 1]).collect()
}

fn truth_from_file(path: &Path) -> Result<GroundTruth> {
    let value: serde_json::Value = io::read_json(path)?;
    GroundTruth::from_json(&value)
}

/// Data shared across repetitions for a CSV source.
enum Prepared {
    Simulation { spec: SimulationSpec },
    Fixed { data: Dataset, truth: Option<GroundTruth> },
}

fn prepare(cfg: &PipelineConfig) -> Result<(Prepared, Vec<String>, Option<GroundTruth>)> {
    match &cfg.data {
        DataSource::Simulation { function_id, n_samples, n_features } => {
            let spec = SimulationSpec { function_id: *function_id, n_samples: *n_samples, n_features: *n_features, seed: 0 };
            let truth = crate::sim::ground_truth_pairs(*function_id)?;
            Ok((Prepared::Simulation { spec }, crate::data::default_names(*n_features), Some(truth)))
        }
        DataSource::Csv { path, response, categorical, standardize, task, truth } => {
            let data = ingest_csv(path, response, categorical, *standardize, *task)?;
            let truth = truth.as_deref().map(truth_from_file).transpose()?;
            let names = data.feature_names.clone();
            Ok((Prepared::Fixed { data, truth: truth.clone() }, names, truth))
        }
    }
}

/// Everything one repetition produces.
pub struct RepetitionArtifacts {
    pub data: Dataset,
    pub truth: Option<GroundTruth>,
    pub train_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
    pub x_tilde: DMatrix<f64>,
    pub model: mlp::CouplingMlp,
    pub attribution: AttributionResult,
    pub gamma: InteractionScoreSet,
    pub gamma_raw: InteractionScoreSet,
    pub selection: SelectionResult,
    pub raw_selection: SelectionResult,
    pub baselines: BTreeMap<String, SelectionResult>,
    pub detail: RepetitionDetail,
}

/// Shuffled 50/50 split from stream `(seed, SPLIT, 0)`; both halves sorted.
pub fn split_rows(n: usize, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, stage::SPLIT, 0));
    let (a, b) = idx.split_at(n / 2);
    let (mut train, mut test) = (a.to_vec(), b.to_vec());
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Knockoffs for all rows, with the Gaussian model fitted on `train` rows.
pub fn make_knockoffs(x: &DMatrix<f64>, train: &[usize], cfg: &KnockoffConfig, seed: u64) -> Result<DMatrix<f64>> {
    match cfg.method {
        KnockoffMethod::Gaussian => {
            let x_train = DMatrix::from_fn(train.len(), x.ncols(), |r, c| x[(train[r], c)]);
            let shrinkage = cfg.shrinkage.unwrap_or_else(|| knockoffs::default_shrinkage(train.len(), x.ncols()));
            let model = knockoffs::fit_gaussian(&x_train, shrinkage)?;
            knockoffs::sample_knockoffs(&model, x, seed)
        }
        KnockoffMethod::Permutation => Ok(knockoffs::permutation_knockoffs(x, seed)),
    }
}

fn summarize_selection(sel: &SelectionResult, scores: &[(Pair, f64)], truth: Option<&GroundTruth>) -> SelectionSummary {
    let pairs = sel.selected_pairs();
    let (fdp, power, auc) = match truth {
        Some(t) => {
            let (f, pw) = metrics(&pairs, t);
            (Some(f), Some(pw), auroc(scores, t).ok())
        }
        None => (None, None, None),
    };
    SelectionSummary {
        threshold: sel.threshold,
        estimated_fdp: sel.estimated_fdp,
        selected: pairs_1based(&pairs),
        fdp,
        power,
        auroc: auc,
    }
}

fn oo_scores(gamma: &InteractionScoreSet) -> Vec<(Pair, f64)> {
    gamma.original_only().map(|e| (e.pair, e.score)).collect()
}

/// KS distance between OO scores of non-truth pairs and knockoff-involving
/// scores.
fn null_ks(gamma: &InteractionScoreSet, truth: &GroundTruth) -> f64 {
    let null_oo: Vec<f64> = gamma
        .original_only()
        .filter(|e| !truth.contains(e.pair.i + 1, e.pair.j + 1))
        .map(|e| e.score)
        .collect();
    let ko: Vec<f64> = gamma.entries.iter().filter(|e| e.category.is_knockoff_involving()).map(|e| e.score).collect();
    ks_two_sample(&null_oo, &ko)
}

/// Clamps `y` to the `[frac, 1 − frac]` quantiles of the `train` rows
/// (linear interpolation between order statistics).
pub fn winsorized_response(y: &[f64], train: &[usize], frac: f64) -> Result<Vec<f64>> {
    if !(0.0..0.5).contains(&frac) {
        return Err(Error::InvalidArgument(format!("winsorizing fraction {frac} outside [0, 0.5)")));
    }
    if frac == 0.0 || train.is_empty() {
        return Ok(y.to_vec());
    }
    let mut v: Vec<f64> = train.iter().map(|&r| y[r]).collect();
    v.sort_by(f64::total_cmp);
    let quantile = |f: f64| {
        let pos = (v.len() - 1) as f64 * f;
        let k = pos.floor() as usize;
        let hi = v[(k + 1).min(v.len() - 1)];
        v[k] + (pos - k as f64) * (hi - v[k])
    };
    let (lo, hi) = (quantile(frac), quantile(1.0 - frac));
    Ok(y.iter().map(|v| v.clamp(lo, hi)).collect())
}

/// `(y − mean) / sd` with moments from the `train` rows.
pub fn standardized_response(y: &[f64], train: &[usize]) -> Result<Vec<f64>> {
    let n = train.len() as f64;
    let mean = train.iter().map(|&r| y[r]).sum::<f64>() / n;
    let sd = (train.iter().map(|&r| (y[r] - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    if !(sd > 0.0 && sd.is_finite()) {
        return Err(Error::InvalidArgument("response is constant on the training split".into()));
    }
    Ok(y.iter().map(|v| (v - mean) / sd).collect())
}

fn elapsed(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Runs every stage of repetition `index` in memory.
pub fn run_repetition(cfg: &PipelineConfig, index: usize) -> Result<(RepetitionArtifacts, StageTimings)> {
    let (prepared, _, _) = prepare(cfg)?;
    run_prepared(cfg, &prepared, index)
}

fn run_prepared(cfg: &PipelineConfig, prepared: &Prepared, index: usize) -> Result<(RepetitionArtifacts, StageTimings)> {
    let seed = cfg.base_seed.wrapping_add(index as u64);
    let mut timings = StageTimings::default();

    let t = Instant::now();
    let (data, truth) = match prepared {
        Prepared::Simulation { spec } => {
            let (d, t) = generate_dataset(&SimulationSpec { seed, ..*spec })?;
            (d, Some(t))
        }
        Prepared::Fixed { data, truth } => (data.clone(), truth.clone()),
    };
    let (train_idx, test_idx) = split_rows(data.n_samples(), seed);
    timings.data = elapsed(t);

    let t = Instant::now();
    let x_tilde = make_knockoffs(&data.x, &train_idx, &cfg.knockoffs, seed)?;
    let mut response = data.y.clone();
    if data.task == Task::Regression {
        response = winsorized_response(&response, &train_idx, cfg.winsorize_response)?;
        if cfg.standardize_response {
            response = standardized_response(&response, &train_idx)?;
        }
    }
    let aug = AugmentedDataset::new(&data.x, &x_tilde, response, data.task)?;
    let train_aug = aug.subset(&train_idx);
    let test_aug = aug.subset(&test_idx);
    let p = aug.p();
    let knockoff_diagnostics = knockoffs::diagnostics(
        &train_aug.columns.columns(0, p).into_owned(),
        &train_aug.columns.columns(p, p).into_owned(),
    )?;
    timings.knockoffs = elapsed(t);

    let t = Instant::now();
    let model = mlp::train(&train_aug, &TrainConfig { seed, ..cfg.train.clone() })?;
    let test_r2 = match data.task {
        Task::Regression => Some(mlp::r_squared(&model, &test_aug)?),
        Task::Binary => None,
    };
    timings.train = elapsed(t);

    let t = Instant::now();
    let attribution = attribute(&model, &row_major(&test_aug.columns), &cfg.attribution, seed)?;
    timings.attribute = elapsed(t);

    let t = Instant::now();
    let gamma_raw = raw_scores(&attribution)?;
    let (gamma, distill_fit) = if cfg.distill {
        let (g, res) = distill(&attribution, &cfg.distillation)?;
        (g, Some(res.fit_diagnostics))
    } else {
        (gamma_raw.clone(), None)
    };
    timings.distill = elapsed(t);

    let t = Instant::now();
    let selection = interaction_threshold(&gamma, cfg.q)?;
    let raw_selection = interaction_threshold(&gamma_raw, cfg.q)?;
    timings.select = elapsed(t);

    let t = Instant::now();
    let mut baselines = BTreeMap::new();
    let mut baseline_summaries = BTreeMap::new();
    let pvals = if cfg.baselines.methods.iter().any(|m| matches!(m, BaselineMethod::PermBh | BaselineMethod::PermBy)) {
        Some(permutation_pvalues(&train_aug, &test_aug, &cfg.baselines.permutation, seed)?)
    } else {
        None
    };
    for method in &cfg.baselines.methods {
        let (name, sel, scores) = match method {
            BaselineMethod::PermBh | BaselineMethod::PermBy => {
                let table = pvals.as_ref().expect("p-values computed above");
                let dependent = *method == BaselineMethod::PermBy;
                let name = if dependent { "perm-by" } else { "perm-bh" };
                let scores: Vec<(Pair, f64)> = table.pairs.iter().zip(&table.p).map(|(p, v)| (*p, -v)).collect();
                (name, step_up_selection(table, cfg.q, dependent)?, scores)
            }
            BaselineMethod::Featurewise => {
                let sel = featurewise_selection(&attribution.e1d, &attribution.e2d, cfg.q)?;
                let scores = sel.q_values.iter().map(|(p, v)| (*p, -v)).collect();
                ("featurewise", sel, scores)
            }
        };
        baseline_summaries.insert(name.to_string(), summarize_selection(&sel, &scores, truth.as_ref()));
        baselines.insert(name.to_string(), sel);
    }
    timings.baselines = elapsed(t);

    let (ks_before, ks_after) = match (&truth, cfg.distill) {
        (Some(t), true) => (Some(null_ks(&gamma_raw, t)), Some(null_ks(&gamma, t))),
        _ => (None, None),
    };
    let detail = RepetitionDetail {
        n_train: train_idx.len(),
        n_test: test_idx.len(),
        epochs_run: model.training.as_ref().map_or(0, |s| s.epochs_run),
        test_r2,
        knockoff_diagnostics,
        selection: summarize_selection(&selection, &oo_scores(&gamma), truth.as_ref()),
        raw_selection: summarize_selection(&raw_selection, &oo_scores(&gamma_raw), truth.as_ref()),
        distill_fit,
        ks_before,
        ks_after,
        baselines: baseline_summaries,
    };
    Ok((
        RepetitionArtifacts {
            data,
            truth,
            train_idx,
            test_idx,
            x_tilde,
            model,
            attribution,
            gamma,
            gamma_raw,
            selection,
            raw_selection,
            baselines,
            detail,
        },
        timings,
    ))
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    train: Vec<usize>,
    test: Vec<usize>,
}

pub fn repetition_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("rep_{index:03}"))
}

/// Writes a repetition's intermediates.
pub fn persist(dir: &Path, a: &RepetitionArtifacts) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    io::write_dataset(&dir.join("data.csv"), &a.data)?;
    io::write_json(&dir.join("split.json"), &SplitFile { train: a.train_idx.clone(), test: a.test_idx.clone() })?;
    io::write_knockoffs(&dir.join("knockoffs.csv"), &a.data.feature_names, &a.x_tilde)?;
    std::fs::write(dir.join("model.json"), a.model.to_json()?)?;
    io::write_json(&dir.join("attrib.json"), &a.attribution)?;
    io::write_gamma(&dir.join("gamma.csv"), &a.gamma)?;
    io::write_gamma(&dir.join("gamma_raw.csv"), &a.gamma_raw)?;
    io::write_json(&dir.join("selection.json"), &a.selection.to_json())?;
    io::write_json(&dir.join("selection_raw.json"), &a.raw_selection.to_json())?;
    for (name, sel) in &a.baselines {
        io::write_json(&dir.join(format!("baseline_{name}.json")), &sel.to_json())?;
    }
    if let Some(t) = &a.truth {
        io::write_json(&dir.join("truth.json"), &t.to_json())?;
    }
    Ok(())
}

fn aggregate(details: &[&RepetitionDetail], has_truth: bool) -> Option<MetricsReport> {
    if !has_truth || details.is_empty() {
        return None;
    }
    let collect = |f: &dyn Fn(&RepetitionDetail) -> Option<f64>| -> Vec<f64> { details.iter().filter_map(|d| f(d)).collect() };
    let aurocs = collect(&|d| d.selection.auroc);
    let mut baselines = BTreeMap::new();
    let names: std::collections::BTreeSet<&String> = details.iter().flat_map(|d| d.baselines.keys()).collect();
    for name in names {
        let mut m = BTreeMap::new();
        m.insert("fdp".to_string(), summarize(&collect(&|d| d.baselines.get(name).and_then(|s| s.fdp))));
        m.insert("power".to_string(), summarize(&collect(&|d| d.baselines.get(name).and_then(|s| s.power))));
        baselines.insert(name.clone(), m);
    }
    Some(MetricsReport {
        completed: details.len(),
        fdp: summarize(&collect(&|d| d.selection.fdp)),
        power: summarize(&collect(&|d| d.selection.power)),
        auroc: (!aurocs.is_empty()).then(|| summarize(&aurocs)),
        raw_fdp: summarize(&collect(&|d| d.raw_selection.fdp)),
        raw_power: summarize(&collect(&|d| d.raw_selection.power)),
        baselines,
    })
}

/// Runs all repetitions (concurrently up to `cfg.workers`) and, when an
/// output directory is set, persists intermediates, `summary.json` and
/// `timings.json`. A failing repetition is recorded and the rest continue.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let (prepared, feature_names, truth) = prepare(cfg)?;
    if let Some(out) = &cfg.output_dir {
        std::fs::create_dir_all(out)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let outcomes: Vec<(RepetitionReport, Option<StageTimings>)> = pool.install(|| {
        (0..cfg.repetitions)
            .into_par_iter()
            .map(|index| {
                let seed = cfg.base_seed.wrapping_add(index as u64);
                let result = run_prepared(cfg, &prepared, index).and_then(|(art, timings)| {
                    if let Some(out) = &cfg.output_dir {
                        persist(&repetition_dir(out, index), &art)?;
                    }
                    Ok((art.detail, timings))
                });
                match result {
                    Ok((detail, timings)) => (
                        RepetitionReport { index, seed, status: RepStatus::Ok, error: None, detail: Some(detail) },
                        Some(timings),
                    ),
                    Err(e) => (
                        RepetitionReport { index, seed, status: RepStatus::Failed, error: Some(e.to_string()), detail: None },
                        None,
                    ),
                }
            })
            .collect()
    });
    let (repetitions, timings): (Vec<_>, Vec<_>) = outcomes.into_iter().unzip();
    let details: Vec<&RepetitionDetail> = repetitions.iter().filter_map(|r| r.detail.as_ref()).collect();
    let metrics = aggregate(&details, truth.is_some());
    let summary = RunSummary {
        schema: SUMMARY_SCHEMA.into(),
        config: cfg.recorded(),
        feature_names,
        truth: truth.as_ref().map(|t| t.pairs.iter().map(|&(i, j)| [i, j]).collect()),
        repetitions,
        metrics,
    };
    if let Some(out) = &cfg.output_dir {
        io::write_json(&out.join("summary.json"), &summary)?;
        let total = timings.iter().flatten().fold(StageTimings::default(), |mut acc, t| {
            acc.data += t.data;
            acc.knockoffs += t.knockoffs;
            acc.train += t.train;
            acc.attribute += t.attribute;
            acc.distill += t.distill;
            acc.select += t.select;
            acc.baselines += t.baselines;
            acc
        });
        io::write_json(&out.join("timings.json"), &serde_json::json!({ "per_repetition": timings, "total": total }))?;
    }
    Ok(summary)
}

const HISTOGRAM_BINS: usize = 50;

/// Writes `fdp_power.csv`, `score_distributions.csv` and `qvalue_matrix.csv`
/// into `run_dir` from a finished run.
pub fn emit_plot_data(run_dir: &Path) -> Result<Vec<PathBuf>> {
    let summary_path = run_dir.join("summary.json");
    if !summary_path.is_file() {
        return Err(Error::IncompleteRun(format!("{} has no summary.json", run_dir.display())));
    }
    let summary: RunSummary = io::read_json(&summary_path)?;
    let mut gammas = Vec::new();
    for rep in summary.repetitions.iter().filter(|r| r.status == RepStatus::Ok) {
        let dir = repetition_dir(run_dir, rep.index);
        let (g, raw) = (dir.join("gamma.csv"), dir.join("gamma_raw.csv"));
        if !g.is_file() || !raw.is_file() {
            return Err(Error::IncompleteRun(format!("{} lacks gamma.csv or gamma_raw.csv", dir.display())));
        }
        gammas.push((rep.index, io::read_gamma(&raw)?, io::read_gamma(&g)?));
    }
    if gammas.is_empty() {
        return Err(Error::IncompleteRun("no completed repetitions".into()));
    }

    let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let fdp_path = run_dir.join("fdp_power.csv");
    let mut w = csv::Writer::from_path(&fdp_path)?;
    w.write_record(["repetition", "seed", "status", "fdp", "power", "auroc", "raw_fdp", "raw_power", "n_selected"])?;
    for rep in &summary.repetitions {
        let d = rep.detail.as_ref();
        w.write_record([
            rep.index.to_string(),
            rep.seed.to_string(),
            format!("{:?}", rep.status).to_lowercase(),
            fmt(d.and_then(|d| d.selection.fdp)),
            fmt(d.and_then(|d| d.selection.power)),
            fmt(d.and_then(|d| d.selection.auroc)),
            fmt(d.and_then(|d| d.raw_selection.fdp)),
            fmt(d.and_then(|d| d.raw_selection.power)),
            d.map(|d| d.selection.selected.len().to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;

    let dist_path = run_dir.join("score_distributions.csv");
    let mut w = csv::Writer::from_path(&dist_path)?;
    w.write_record(["stage", "group", "bin_low", "bin_high", "count"])?;
    for (stage_name, pick) in [("raw", 0usize), ("distilled", 1)] {
        let sets: Vec<&InteractionScoreSet> = gammas.iter().map(|(_, r, g)| if pick == 0 { r } else { g }).collect();
        let all: Vec<f64> = sets.iter().flat_map(|s| s.entries.iter().map(|e| e.score)).collect();
        let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
        for (group, is_ko) in [("original_only", false), ("knockoff_involving", true)] {
            let mut counts = [0usize; HISTOGRAM_BINS];
            for e in sets.iter().flat_map(|s| s.entries.iter()).filter(|e| e.category.is_knockoff_involving() == is_ko) {
                let b = (((e.score - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
                counts[b] += 1;
            }
            for (b, c) in counts.iter().enumerate() {
                w.write_record([
                    stage_name.to_string(),
                    group.to_string(),
                    (lo + b as f64 * width).to_string(),
                    (lo + (b + 1) as f64 * width).to_string(),
                    c.to_string(),
                ])?;
            }
        }
    }
    w.flush()?;

    let q_path = run_dir.join("qvalue_matrix.csv");
    let mut w = csv::Writer::from_path(&q_path)?;
    let names = &summary.feature_names;
    let mut header = vec!["repetition".to_string(), "feature".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (index, _, gamma) in &gammas {
        let qv = q_values(gamma);
        let p = gamma.p;
        for i in 0..p {
            let mut row = vec![index.to_string(), names.get(i).cloned().unwrap_or_else(|| format!("x{}", i + 1))];
            for j in 0..p {
                row.push(if i == j { String::new() } else { qv.get(&Pair::new(i, j)).map(|v| v.to_string()).unwrap_or_default() });
            }
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(vec![fdp_path, dist_path, q_path])
}

/// Shorthand used by tests and bindings: knockoff-filter selection at `q`
/// from an attribution result, distilled or not.
pub fn select_from_attribution(attr: &AttributionResult, q: f64, distilled: bool) -> Result<SelectionResult> {
    let gamma = if distilled { distill(attr, &DistillConfig::default())?.0 } else { raw_scores(attr)? };
    interaction_threshold(&gamma, q)
}

/// Category counts of a score set, `(OO, OK, KK)`.
pub fn category_counts(gamma: &InteractionScoreSet) -> (usize, usize, usize) {
    gamma.entries.iter().fold((0, 0, 0), |(a, b, c), e| match e.category {
        Category::OO => (a + 1, b, c),
        Category::OK => (a, b + 1, c),
        Category::KK => (a, b, c + 1),
    })
}
