//! Python bindings: simulation, knockoffs, the coupling network, attribution,
//! distillation, the interaction filter and the pipeline runner.
//!
//! Matrices cross the boundary as lists of rows. Feature indices are 0-based
//! everywhere except `ground_truth`, which keeps the 1-based numbering of the
//! simulation functions.

use std::collections::BTreeMap;

use ko_interact::attribution::{self as attr, AttributionConfig, Measure};
use ko_interact::baselines;
use ko_interact::data::{row_major, Pair, Task};
use ko_interact::distill::{self, DistillConfig};
use ko_interact::fdr::{self, InteractionScoreSet, SelectionResult};
use ko_interact::harness::{self, PipelineConfig};
use ko_interact::knockoffs::{self, AugmentedDataset};
use ko_interact::mlp::{self, CouplingMlp, TrainConfig};
use ko_interact::sim::{self, SimulationSpec};
use ko_interact::Error;
use nalgebra::DMatrix;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn matrix(rows: &[Vec<f64>]) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let p = rows.first().map_or(0, Vec::len);
    if n == 0 || p == 0 {
        return Err(PyValueError::new_err("matrix must be nonempty"));
    }
    if let Some(r) = rows.iter().position(|r| r.len() != p) {
        return Err(PyValueError::new_err(format!("row {r} has {} columns, expected {p}", rows[r].len())));
    }
    Ok(DMatrix::from_fn(n, p, |r, c| rows[r][c]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn parse_task(task: &str) -> PyResult<Task> {
    match task {
        "regression" => Ok(Task::Regression),
        "binary" => Ok(Task::Binary),
        other => Err(PyValueError::new_err(format!("unknown task {other:?}"))),
    }
}

/// Draws `n` rows from simulation function `function_id` (1..=10) with `p`
/// uniform features. Returns `(x, y, truth)`; `truth` holds 0-based pairs.
#[pyfunction]
#[pyo3(signature = (function_id, n, p, seed=0))]
#[allow(clippy::type_complexity)]
fn simulate(function_id: u8, n: usize, p: usize, seed: u64) -> PyResult<(Vec<Vec<f64>>, Vec<f64>, Vec<(usize, usize)>)> {
    let spec = SimulationSpec { function_id, n_samples: n, n_features: p, seed };
    let (data, truth) = sim::generate_dataset(&spec).map_err(to_py)?;
    let pairs = truth.pairs.iter().map(|&(i, j)| (i - 1, j - 1)).collect();
    Ok((rows(&data.x), data.y, pairs))
}

/// True interacting pairs of a simulation function, 1-based.
#[pyfunction]
fn ground_truth(function_id: u8) -> PyResult<Vec<(usize, usize)>> {
    Ok(sim::ground_truth_pairs(function_id).map_err(to_py)?.pairs.into_iter().collect())
}

/// Gaussian equicorrelated knockoffs fitted on `x` itself.
#[pyfunction]
#[pyo3(signature = (x, seed=0, shrinkage=None))]
fn gaussian_knockoffs(py: Python<'_>, x: Vec<Vec<f64>>, seed: u64, shrinkage: Option<f64>) -> PyResult<Vec<Vec<f64>>> {
    let x = matrix(&x)?;
    py.detach(|| {
        let shrink = shrinkage.unwrap_or_else(|| knockoffs::default_shrinkage(x.nrows(), x.ncols()));
        let model = knockoffs::fit_gaussian(&x, shrink)?;
        knockoffs::sample_knockoffs(&model, &x, seed)
    })
    .map(|m| rows(&m))
    .map_err(to_py)
}

/// Column-wise permutations of `x`; valid marginals, broken dependence.
#[pyfunction]
#[pyo3(signature = (x, seed=0))]
fn permutation_knockoffs(x: Vec<Vec<f64>>, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    Ok(rows(&knockoffs::permutation_knockoffs(&matrix(&x)?, seed)))
}

/// Moment gaps between originals and knockoffs, as a dict.
#[pyfunction]
fn knockoff_diagnostics(x: Vec<Vec<f64>>, x_tilde: Vec<Vec<f64>>) -> PyResult<BTreeMap<String, f64>> {
    let d = knockoffs::diagnostics(&matrix(&x)?, &matrix(&x_tilde)?).map_err(to_py)?;
    Ok(BTreeMap::from([
        ("mean_gap".into(), d.mean_gap),
        ("cov_gap".into(), d.cov_gap),
        ("cross_cov_gap".into(), d.cross_cov_gap),
        ("min_relative_s".into(), d.min_relative_s),
    ]))
}

/// Coupling network over `[x, x̃]`.
#[pyclass(module = "kointeract", frozen)]
struct Model {
    inner: CouplingMlp,
}

#[pymethods]
impl Model {
    /// Trains on originals `x`, knockoffs `x_tilde` and response `y`.
    #[staticmethod]
    #[pyo3(signature = (x, x_tilde, y, task="regression", epochs=200, seed=0, learning_rate=1e-3, batch_size=256))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        x: Vec<Vec<f64>>,
        x_tilde: Vec<Vec<f64>>,
        y: Vec<f64>,
        task: &str,
        epochs: usize,
        seed: u64,
        learning_rate: f64,
        batch_size: usize,
    ) -> PyResult<Self> {
        let (x, xt, task) = (matrix(&x)?, matrix(&x_tilde)?, parse_task(task)?);
        let cfg = TrainConfig { epochs, seed, learning_rate, batch_size, ..TrainConfig::default() };
        py.detach(|| {
            let aug = AugmentedDataset::new(&x, &xt, y, task)?;
            mlp::train(&aug, &cfg)
        })
        .map(|inner| Model { inner })
        .map_err(to_py)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        CouplingMlp::from_json(text).map(|inner| Model { inner }).map_err(to_py)
    }

    fn to_json(&self) -> PyResult<String> {
        self.inner.to_json().map_err(to_py)
    }

    /// Width of the augmented input, `2p`.
    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    /// Predictions for rows laid out as `[x, x̃]`.
    fn predict(&self, rows: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let m = matrix(&rows)?;
        self.inner.predict(&row_major(&m)).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Model(input_dim={})", self.inner.input_dim())
    }
}

/// First- and second-order importance over the augmented columns.
#[pyclass(module = "kointeract", frozen)]
struct Attribution {
    inner: attr::AttributionResult,
}

#[pymethods]
impl Attribution {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let inner: attr::AttributionResult = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().map_err(to_py)?;
        Ok(Attribution { inner })
    }

    fn to_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    #[getter]
    fn measure(&self) -> &'static str {
        match self.inner.measure {
            Measure::Expected => "expected",
            Measure::Integrated => "integrated",
            Measure::ModelSpecific => "model-specific",
        }
    }

    #[getter]
    fn e1d(&self) -> Vec<f64> {
        self.inner.e1d.clone()
    }

    #[getter]
    fn e2d(&self) -> Vec<Vec<f64>> {
        self.inner.e2d.clone()
    }

    /// Distilled interaction scores.
    fn distill(&self) -> PyResult<ScoreSet> {
        distill::distill(&self.inner, &DistillConfig::default()).map(|(inner, _)| ScoreSet { inner }).map_err(to_py)
    }

    /// Undistilled pairwise importance as scores.
    fn raw_scores(&self) -> PyResult<ScoreSet> {
        distill::raw_scores(&self.inner).map(|inner| ScoreSet { inner }).map_err(to_py)
    }
}

/// Explains `rows` (laid out as `[x, x̃]`) with `measure`: "expected",
/// "integrated" or "model-specific".
#[pyfunction]
#[pyo3(signature = (model, rows, measure="expected", draws=128, grid=16, seed=0))]
fn attribute(py: Python<'_>, model: &Model, rows: Vec<Vec<f64>>, measure: &str, draws: usize, grid: usize, seed: u64) -> PyResult<Attribution> {
    let measure: Measure = measure.parse().map_err(to_py)?;
    let explain = row_major(&matrix(&rows)?);
    let cfg = AttributionConfig { measure, draws, grid, max_rows: None };
    py.detach(|| attr::attribute(&model.inner, &explain, &cfg, seed)).map(|inner| Attribution { inner }).map_err(to_py)
}

/// Pair scores with their original/knockoff category.
#[pyclass(module = "kointeract", frozen)]
struct ScoreSet {
    inner: InteractionScoreSet,
}

#[pymethods]
impl ScoreSet {
    #[getter]
    fn p(&self) -> usize {
        self.inner.p
    }

    /// `(i, j, category, score)` per pair; category is "OO", "OK" or "KK".
    fn entries(&self) -> Vec<(usize, usize, &'static str, f64)> {
        self.inner.entries.iter().map(|e| (e.pair.i, e.pair.j, e.category.as_str(), e.score)).collect()
    }

    /// Knockoff-filtered selection at target FDR `q`.
    fn select(&self, q: f64) -> PyResult<Selection> {
        fdr::interaction_threshold(&self.inner, q).map(|inner| Selection { inner }).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }
}

#[pyclass(module = "kointeract", frozen)]
struct Selection {
    inner: SelectionResult,
}

#[pymethods]
impl Selection {
    /// Score cutoff, or None when nothing qualifies.
    #[getter]
    fn threshold(&self) -> Option<f64> {
        self.inner.threshold
    }

    #[getter]
    fn estimated_fdp(&self) -> Option<f64> {
        self.inner.estimated_fdp
    }

    /// Selected original pairs `(i, j, score)` by decreasing score.
    #[getter]
    fn selected(&self) -> Vec<(usize, usize, f64)> {
        self.inner.selected.iter().map(|(p, s)| (p.i, p.j, *s)).collect()
    }

    /// Minimum target FDR at which each original pair enters.
    #[getter]
    fn q_values(&self) -> BTreeMap<(usize, usize), f64> {
        self.inner.q_values.iter().map(|(p, q)| ((p.i, p.j), *q)).collect()
    }

    fn __repr__(&self) -> String {
        let t = self.inner.threshold.map_or("None".to_string(), |t| t.to_string());
        format!("Selection(threshold={t}, n_selected={})", self.inner.selected.len())
    }
}

/// Benjamini-Hochberg (or Benjamini-Yekutieli with `dependent=True`) on raw
/// p-values. Returns the selected indices, ascending.
#[pyfunction]
#[pyo3(signature = (pvalues, q, dependent=false))]
fn step_up(pvalues: Vec<f64>, q: f64, dependent: bool) -> PyResult<Vec<usize>> {
    let m = pvalues.len();
    let table = baselines::PValueTable {
        pairs: (0..m).map(|k| Pair::new(k, m + k)).collect(),
        p: pvalues,
        observed: vec![0.0; m],
        n_permutations: 0,
    };
    let chosen = if dependent { baselines::by_select(&table, q) } else { baselines::bh_select(&table, q) }.map_err(to_py)?;
    let mut idx: Vec<usize> = chosen.into_iter().map(|p| p.i).collect();
    idx.sort_unstable();
    Ok(idx)
}

#[pyfunction]
#[pyo3(signature = (pvalues, dependent=false))]
fn adjusted_pvalues(pvalues: Vec<f64>, dependent: bool) -> Vec<f64> {
    baselines::adjusted_pvalues(&pvalues, dependent)
}

/// Runs the full pipeline from a JSON config (same schema as the CLI) and
/// returns the run summary as JSON.
#[pyfunction]
fn run_pipeline(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: PipelineConfig = serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("config: {e}")))?;
    let summary = py.detach(|| harness::run_pipeline(&cfg)).map_err(to_py)?;
    serde_json::to_string(&summary).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pymodule]
fn kointeract(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<Model>()?;
    m.add_class::<Attribution>()?;
    m.add_class::<ScoreSet>()?;
    m.add_class::<Selection>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(ground_truth, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_knockoffs, m)?)?;
    m.add_function(wrap_pyfunction!(permutation_knockoffs, m)?)?;
    m.add_function(wrap_pyfunction!(knockoff_diagnostics, m)?)?;
    m.add_function(wrap_pyfunction!(attribute, m)?)?;
    m.add_function(wrap_pyfunction!(step_up, m)?)?;
    m.add_function(wrap_pyfunction!(adjusted_pvalues, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
