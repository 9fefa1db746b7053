//! Python access to configs, runs, checkpoints and the core formulas.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mvp_core::harness::{self, RunOptions};
use mvp_core::pruning::{threshold_mask as mask_of, PruneVector};
use mvp_core::MvpError;

fn py_err(e: MvpError) -> PyErr {
    match e {
        MvpError::Validation(_) | MvpError::Configuration(_) | MvpError::Dimension(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn json(v: &harness::MetricsReport) -> PyResult<String> {
    serde_json::to_string(v).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// A validated run configuration.
#[pyclass(name = "RunConfig", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: harness::RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// The calibrated default configuration.
    #[new]
    fn new() -> Self {
        Self {
            inner: harness::RunConfig::default(),
        }
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        harness::parse_config(text).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        harness::load_config(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json_pretty()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn strategy(&self) -> String {
        self.inner.strategy.to_string()
    }

    #[setter]
    fn set_strategy(&mut self, name: &str) -> PyResult<()> {
        self.inner.strategy = name.parse().map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn n_experts(&self) -> usize {
        self.inner.moe.n_experts
    }

    /// Copy with a different expert count.
    fn with_experts(&self, n_experts: usize) -> Self {
        Self {
            inner: self.inner.with_experts(n_experts),
        }
    }

    fn __repr__(&self) -> String {
        format!(
            "RunConfig(strategy={}, seed={}, n_experts={}, k={})",
            self.inner.strategy, self.inner.seed, self.inner.moe.n_experts, self.inner.moe.k
        )
    }
}

/// State of a run after some tasks have been learned.
#[pyclass(name = "Run")]
struct PyRun {
    state: harness::RunState,
    report: Option<harness::MetricsReport>,
}

#[pymethods]
impl PyRun {
    #[getter]
    fn completed(&self) -> usize {
        self.state.completed()
    }

    #[getter]
    fn n_tasks(&self) -> usize {
        self.state.tasks.len()
    }

    /// Accuracy rows, one per learned task.
    #[getter]
    fn perf_rows(&self) -> Vec<Vec<f64>> {
        self.state.perf.rows.clone()
    }

    #[getter]
    fn zero_shot(&self) -> Vec<f64> {
        self.state.perf.zero_shot.clone()
    }

    /// Metrics as JSON, or `None` while the stream is unfinished.
    fn metrics_json(&self) -> PyResult<Option<String>> {
        self.report.as_ref().map(json).transpose()
    }

    #[getter]
    fn mean_last(&self) -> Option<f64> {
        self.report.as_ref().map(|m| m.mean_last)
    }

    fn evaluate(&self, task: usize) -> PyResult<f64> {
        if task >= self.state.tasks.len() {
            return Err(PyValueError::new_err(format!("no task {task}")));
        }
        self.state.evaluate(task).map_err(py_err)
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        harness::save_checkpoint(&self.state, &path).map_err(py_err)
    }
}

/// Runs the stream; with `out_dir` every artifact is written there.
#[pyfunction]
#[pyo3(signature = (config, out_dir=None, stop_after=None, resume=false))]
fn run_stream(
    py: Python<'_>,
    config: PyRunConfig,
    out_dir: Option<PathBuf>,
    stop_after: Option<usize>,
    resume: bool,
) -> PyResult<PyRun> {
    let opts = RunOptions {
        out_dir,
        stop_after,
        resume,
    };
    let out = py
        .detach(|| harness::run_stream(&config.inner, &opts))
        .map_err(py_err)?;
    Ok(PyRun {
        state: out.state,
        report: out.report,
    })
}

#[pyfunction]
fn load_checkpoint(path: PathBuf) -> PyResult<PyRun> {
    let state = harness::load_checkpoint(&path).map_err(py_err)?;
    let report = if state.completed() == state.tasks.len() {
        Some(harness::compute_metrics(&state.perf).map_err(py_err)?)
    } else {
        None
    };
    Ok(PyRun { state, report })
}

/// Sparse top-K softmax; returns `(weights, selected)`.
#[pyfunction]
fn top_k_gate(logits: Vec<f64>, k: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let g = mvp_core::moe::top_k_gate(&logits, k).map_err(py_err)?;
    Ok((g.weights, g.selected))
}

#[pyfunction]
#[pyo3(signature = (history, current))]
fn bias_loss(history: Option<Vec<f64>>, current: Vec<f64>) -> PyResult<f64> {
    mvp_core::objectives::bias_loss(history.as_deref(), &current).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (target, profiles, current, tau=1.0, verbatim=false))]
fn recommendation_loss(
    target: Vec<f64>,
    profiles: Vec<Vec<f64>>,
    current: Vec<f64>,
    tau: f64,
    verbatim: bool,
) -> PyResult<f64> {
    let refs: Vec<&[f64]> = profiles.iter().map(Vec::as_slice).collect();
    mvp_core::objectives::recommendation_loss(&target, &refs, &current, tau, verbatim).map_err(py_err)
}

/// Binary keep-mask for a prune vector.
#[pyfunction]
#[pyo3(signature = (e, threshold=1e-3))]
fn threshold_mask(e: Vec<f64>, threshold: f64) -> Vec<bool> {
    mask_of(&PruneVector { e, threshold }).0
}

/// Worst relative finite-difference error per objective.
#[pyfunction]
#[pyo3(signature = (trials=100, seed=0, step=mvp_core::harness::gradsuite::DEFAULT_STEP))]
fn gradient_suite(py: Python<'_>, trials: usize, seed: u64, step: f64) -> PyResult<Vec<(String, f64)>> {
    let entries = py
        .detach(|| harness::gradient_suite(trials, seed, step))
        .map_err(py_err)?;
    Ok(entries.into_iter().map(|e| (e.objective, e.max_rel_error)).collect())
}

/// Last/Avg/Transfer metrics for a serialized performance matrix.
#[pyfunction]
fn compute_metrics(perf_json: &str) -> PyResult<String> {
    let perf: harness::PerfMatrix =
        serde_json::from_str(perf_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    json(&harness::compute_metrics(&perf).map_err(py_err)?)
}

#[pymodule]
fn mvp(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyRun>()?;
    m.add_function(wrap_pyfunction!(run_stream, m)?)?;
    m.add_function(wrap_pyfunction!(load_checkpoint, m)?)?;
    m.add_function(wrap_pyfunction!(top_k_gate, m)?)?;
    m.add_function(wrap_pyfunction!(bias_loss, m)?)?;
    m.add_function(wrap_pyfunction!(recommendation_loss, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_mask, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_suite, m)?)?;
    m.add_function(wrap_pyfunction!(compute_metrics, m)?)?;
    Ok(())
}
