use std::path::Path;

use fedloom_core::aggregation::{
    self, AggregationPolicy, ServerModelState, StalenessScheme, WorkerId, WorkerResponse,
};
use fedloom_core::config::ScenarioFile;
use fedloom_core::model;
use fedloom_core::orchestrator::RoundRecord;
use fedloom_core::protocol::frame::{decode_frame, encode_frame, Message};
use fedloom_core::selection::{self, RMinMaxState, TimeBasedState, WorkerProfile};
use fedloom_core::{scenarios, sim, Error};
use pyo3::exceptions::{PyIOError, PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn err(e: Error) -> PyErr {
    match e {
        Error::Transport(io) => PyIOError::new_err(io.to_string()),
        Error::NotFound(what) => PyKeyError::new_err(what),
        Error::InvalidArgument(_) | Error::Config(_) | Error::Parse(_) | Error::Format { .. } => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

/// Softmax-regression weights: `(n_features + 1) x n_classes`, bias row last.
#[pyclass(name = "Weights", module = "fedloom", skip_from_py_object)]
#[derive(Clone)]
struct PyWeights {
    inner: model::ModelWeights,
}

#[pymethods]
impl PyWeights {
    #[new]
    fn new(n_features: usize, n_classes: usize, values: Vec<f64>) -> PyResult<Self> {
        let inner = model::ModelWeights::new(n_features, n_classes, values).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn zeros(n_features: usize, n_classes: usize) -> PyResult<Self> {
        let inner = model::ModelWeights::zeros(n_features, n_classes).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (n_features, n_classes, seed = 0))]
    fn init(n_features: usize, n_classes: usize, seed: u64) -> PyResult<Self> {
        let inner = model::init_weights(n_features, n_classes, seed).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        let inner = model::ModelWeights::from_bytes(data).map_err(err)?;
        Ok(Self { inner })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.inner.to_bytes())
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.inner.values().to_vec()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.shape()
    }

    fn predict(&self, features: Vec<f64>) -> PyResult<usize> {
        if features.len() != self.inner.n_features() {
            return Err(PyValueError::new_err(format!(
                "expected {} features, got {}",
                self.inner.n_features(),
                features.len()
            )));
        }
        Ok(self.inner.predict(&features))
    }

    fn __eq__(&self, other: PyRef<'_, Self>) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        let (nf, nc) = self.inner.shape();
        format!("Weights(n_features={nf}, n_classes={nc})")
    }
}

#[pyclass(name = "Dataset", module = "fedloom", skip_from_py_object)]
#[derive(Clone)]
struct PyDataset {
    inner: model::Dataset,
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> PyResult<Self> {
        if features.len() != labels.len() {
            return Err(PyValueError::new_err("features and labels differ in length"));
        }
        let n_features = features.first().map_or(0, Vec::len);
        let samples = features
            .into_iter()
            .zip(labels)
            .map(|(features, label)| model::Sample { features, label })
            .collect();
        let inner = model::Dataset::new(samples, n_features, n_classes).map_err(err)?;
        Ok(Self { inner })
    }

    /// Gaussian clusters around hypercube corners, one per class.
    #[staticmethod]
    fn synthetic(n_classes: usize, per_class: usize, spread: f64, seed: u64) -> PyResult<Self> {
        let inner = model::synth_dataset(n_classes, per_class, spread, seed).map_err(err)?;
        Ok(Self { inner })
    }

    /// Splits into one shard per entry of `batches`.
    fn partition(&self, batches: Vec<usize>, batch_size: usize, seed: u64) -> PyResult<Vec<PyDataset>> {
        let row = model::AllocationRow::new(batches, batch_size);
        let shards = model::partition(&self.inner, &row, seed).map_err(err)?;
        Ok(shards.into_iter().map(|inner| PyDataset { inner }).collect())
    }

    #[getter]
    fn n_features(&self) -> usize {
        self.inner.n_features()
    }

    #[getter]
    fn n_classes(&self) -> usize {
        self.inner.n_classes()
    }

    #[getter]
    fn labels(&self) -> Vec<usize> {
        self.inner.samples().iter().map(|s| s.label).collect()
    }

    #[getter]
    fn features(&self) -> Vec<Vec<f64>> {
        self.inner.samples().iter().map(|s| s.features.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyfunction]
#[pyo3(signature = (weights, data, learning_rate = 0.1, epochs = 10, seed = 0))]
fn train(
    py: Python<'_>,
    weights: PyRef<'_, PyWeights>,
    data: PyRef<'_, PyDataset>,
    learning_rate: f64,
    epochs: usize,
    seed: u64,
) -> PyResult<PyWeights> {
    let cfg = model::TrainConfig {
        learning_rate,
        epochs,
        rng_seed: seed,
    };
    let (w, d) = (weights.inner.clone(), data.inner.clone());
    let inner = py.detach(|| model::train_epochs(&w, &d, &cfg)).map_err(err)?;
    Ok(PyWeights { inner })
}

#[pyfunction]
fn evaluate(weights: PyRef<'_, PyWeights>, data: PyRef<'_, PyDataset>) -> PyResult<f64> {
    model::evaluate(&weights.inner, &data.inner).map_err(err)
}

fn parse_policy(policy: &str, a: f64) -> PyResult<AggregationPolicy> {
    Ok(match policy {
        "fedavg" => AggregationPolicy::FedAvg,
        "linear" => AggregationPolicy::Weighted(StalenessScheme::Linear),
        "polynomial" => AggregationPolicy::Weighted(StalenessScheme::Polynomial(a)),
        "exponential" => AggregationPolicy::Weighted(StalenessScheme::Exponential(a)),
        other => {
            return Err(PyValueError::new_err(format!(
                "unknown policy {other:?}; use fedavg, linear, polynomial or exponential"
            )))
        }
    })
}

/// Merges `(base_version, weights)` responses into the model at `version`.
/// Returns the new version and weights.
#[pyfunction]
#[pyo3(signature = (version, current, responses, policy = "fedavg", a = 0.5))]
fn aggregate(
    version: u64,
    current: PyRef<'_, PyWeights>,
    responses: Vec<(u64, PyRef<'_, PyWeights>)>,
    policy: &str,
    a: f64,
) -> PyResult<(u64, PyWeights)> {
    let policy = parse_policy(policy, a)?;
    let state = ServerModelState {
        version,
        weights: current.inner.clone(),
    };
    let responses: Vec<WorkerResponse> = responses
        .iter()
        .enumerate()
        .map(|(i, (base, w))| WorkerResponse {
            worker: WorkerId(i as u32),
            base_version: *base,
            epochs: 1,
            weights: w.inner.clone(),
            data_count: 1,
        })
        .collect();
    let next = aggregation::aggregate(&state, &responses, policy).map_err(err)?;
    Ok((next.version, PyWeights { inner: next.weights }))
}

#[pyfunction]
#[pyo3(signature = (server_version, base_version, policy = "polynomial", a = 0.5))]
fn staleness_weight(server_version: u64, base_version: u64, policy: &str, a: f64) -> PyResult<f64> {
    match parse_policy(policy, a)? {
        AggregationPolicy::Weighted(s) => {
            aggregation::staleness_weight(s, server_version, base_version).map_err(err)
        }
        AggregationPolicy::FedAvg => Ok(1.0),
    }
}

fn pool(t_one: &[f64], t_transmit: &[f64]) -> PyResult<Vec<WorkerProfile>> {
    if t_one.len() != t_transmit.len() {
        return Err(PyValueError::new_err("t_one and t_transmit differ in length"));
    }
    Ok(t_one
        .iter()
        .zip(t_transmit)
        .enumerate()
        .map(|(i, (&t, &x))| WorkerProfile {
            worker: WorkerId(i as u32),
            t_one: t,
            t_transmit: x,
            cpu_freq: 1.0,
            cpu_prop: 1.0,
            data_count: 1,
        })
        .collect())
}

/// Indices of the workers kept by the r-min/r-max rule.
#[pyfunction]
fn select_rminmax(t_one: Vec<f64>, t_transmit: Vec<f64>, rmin: f64, rmax: f64) -> PyResult<Vec<u32>> {
    let picked = selection::select_rminmax(&pool(&t_one, &t_transmit)?, &RMinMaxState { rmin, rmax });
    Ok(picked.into_iter().map(|w| w.0).collect())
}

/// Indices of the workers that finish `r` epochs within `budget` seconds.
#[pyfunction]
fn select_timebased(t_one: Vec<f64>, t_transmit: Vec<f64>, r: u32, budget: f64) -> PyResult<Vec<u32>> {
    let state = TimeBasedState {
        r,
        t_budget: budget,
        ..Default::default()
    };
    let picked = selection::select_timebased(&pool(&t_one, &t_transmit)?, &state);
    Ok(picked.into_iter().map(|w| w.0).collect())
}

#[pyclass(name = "RoundRecord", module = "fedloom", frozen)]
struct PyRoundRecord {
    #[pyo3(get)]
    round_index: u64,
    #[pyo3(get)]
    started_at: f64,
    #[pyo3(get)]
    finished_at: f64,
    #[pyo3(get)]
    accuracy: f64,
    #[pyo3(get)]
    selected: Vec<u32>,
    #[pyo3(get)]
    responses_used: usize,
}

#[pymethods]
impl PyRoundRecord {
    fn __repr__(&self) -> String {
        format!(
            "RoundRecord(round_index={}, finished_at={}, accuracy={})",
            self.round_index, self.finished_at, self.accuracy
        )
    }
}

impl From<RoundRecord> for PyRoundRecord {
    fn from(r: RoundRecord) -> Self {
        Self {
            round_index: r.round_index,
            started_at: r.started_at,
            finished_at: r.finished_at,
            accuracy: r.accuracy,
            selected: r.selected.into_iter().map(|w| w.0).collect(),
            responses_used: r.responses_used,
        }
    }
}

#[pyfunction]
fn builtin_scenarios() -> Vec<String> {
    scenarios::builtin_names()
}

/// Runs a built-in scenario (by name) or a scenario file (by path) on the
/// virtual clock.
#[pyfunction]
#[pyo3(signature = (scenario, seed = 1))]
fn simulate(py: Python<'_>, scenario: &str, seed: u64) -> PyResult<Vec<PyRoundRecord>> {
    let cfg = match scenarios::builtin(scenario) {
        Some(cfg) => cfg,
        None if Path::new(scenario).exists() => ScenarioFile::load(Path::new(scenario)).map_err(err)?,
        None => return Err(PyKeyError::new_err(format!("no scenario named {scenario:?}"))),
    };
    let records = py.detach(|| sim::run_scenario(&cfg, seed)).map_err(err)?;
    Ok(records.into_iter().map(PyRoundRecord::from).collect())
}

#[pyfunction]
fn time_to_accuracy(records: Vec<PyRef<'_, PyRoundRecord>>, target: f64) -> Option<f64> {
    records
        .iter()
        .find(|r| r.accuracy >= target)
        .map(|r| r.finished_at)
}

/// Frames a message given as JSON (with its `action` tag).
#[pyfunction]
fn encode_message<'py>(py: Python<'py>, message: &str) -> PyResult<Bound<'py, PyBytes>> {
    let msg: Message = serde_json::from_str(message).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(PyBytes::new(py, &encode_frame(&msg).map_err(err)?))
}

/// Decodes one frame; returns the message as JSON and the bytes consumed,
/// or None if `data` holds only part of a frame.
#[pyfunction]
fn decode_message(data: &[u8]) -> PyResult<Option<(String, usize)>> {
    match decode_frame(data).map_err(err)? {
        Some((msg, used)) => {
            let json = serde_json::to_string(&msg).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
            Ok(Some((json, used)))
        }
        None => Ok(None),
    }
}

#[pymodule]
fn fedloom(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyWeights>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyRoundRecord>()?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(aggregate, m)?)?;
    m.add_function(wrap_pyfunction!(staleness_weight, m)?)?;
    m.add_function(wrap_pyfunction!(select_rminmax, m)?)?;
    m.add_function(wrap_pyfunction!(select_timebased, m)?)?;
    m.add_function(wrap_pyfunction!(builtin_scenarios, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(time_to_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(encode_message, m)?)?;
    m.add_function(wrap_pyfunction!(decode_message, m)?)?;
    Ok(())
}
