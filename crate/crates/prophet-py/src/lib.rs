//! Python bindings: configure and run experiments, work with trace files and
//! evaluate shard failure probabilities.

use std::collections::BTreeMap;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use prophet_core::config::{ExperimentConfig, Mechanism};
use prophet_core::engine::{run_experiment, RunOutput};
use prophet_core::metrics::{write_csv, write_json};
use prophet_core::simnet::FaultThreshold;
use prophet_core::workload::{format_trace, generate, parse_trace};

fn py_err(e: prophet_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Experiment configuration, built from the same TOML the CLI reads.
#[pyclass(name = "Config", module = "prophet_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = ""))]
    fn new(toml: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::from_toml_str(toml).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let inner = ExperimentConfig::load(path).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn mechanism(&self) -> String {
        self.inner.mechanism.to_string()
    }

    #[setter]
    fn set_mechanism(&mut self, value: &str) -> PyResult<()> {
        self.inner.mechanism = value.parse::<Mechanism>().map_err(py_err)?;
        Ok(())
    }

    #[getter]
    fn n_shards(&self) -> u32 {
        self.inner.sim.n_shards
    }

    #[setter]
    fn set_n_shards(&mut self, value: u32) {
        self.inner.sim.n_shards = value;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.sim.rng_seed
    }

    /// Reseeds both the simulator and the workload generator.
    #[setter]
    fn set_seed(&mut self, value: u64) {
        self.inner = self.inner.clone().with_seed(value);
    }

    #[getter]
    fn n_txns(&self) -> usize {
        self.inner.workload.n_txns
    }

    #[setter]
    fn set_n_txns(&mut self, value: usize) {
        self.inner.workload.n_txns = value;
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml_string().map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(mechanism={:?}, n_shards={}, seed={}, n_txns={})",
            self.inner.mechanism.to_string(),
            self.inner.sim.n_shards,
            self.inner.sim.rng_seed,
            self.inner.workload.n_txns
        )
    }
}

/// Outcome of one simulated run.
#[pyclass(name = "RunResult", module = "prophet_py", frozen)]
struct PyRunResult {
    inner: RunOutput,
}

#[pymethods]
impl PyRunResult {
    #[getter]
    fn throughput_tps(&self) -> f64 {
        self.inner.report.throughput_tps
    }

    #[getter]
    fn latency_mean_ms(&self) -> f64 {
        self.inner.report.latency.mean_ms
    }

    #[getter]
    fn abort_ratio(&self) -> f64 {
        self.inner.report.abort_ratio
    }

    #[getter]
    fn invalid_ratio(&self) -> f64 {
        self.inner.report.invalid_ratio
    }

    #[getter]
    fn confirmed(&self) -> u64 {
        self.inner.report.confirmed
    }

    #[getter]
    fn event_digest(&self) -> String {
        self.inner.report.event_digest.clone()
    }

    #[getter]
    fn invariant_violations(&self) -> Vec<String> {
        self.inner.report.invariant_violations.clone()
    }

    /// Transaction ids in confirmed serial order.
    #[getter]
    fn confirmed_history(&self) -> Vec<u64> {
        self.inner.confirmed_history.iter().map(|t| t.0).collect()
    }

    /// Final value of every written key, keyed by `(contract, slot)`.
    fn confirmed_state(&self) -> BTreeMap<(u32, u32), u64> {
        self.inner
            .confirmed_state
            .iter()
            .map(|(k, v)| ((k.contract.0, k.slot), *v))
            .collect()
    }

    fn to_json(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        write_json(std::slice::from_ref(&self.inner.report), &mut buf).map_err(py_err)?;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }

    fn to_csv(&self) -> PyResult<String> {
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&self.inner.report), &mut buf).map_err(py_err)?;
        Ok(String::from_utf8_lossy(&buf).into_owned())
    }
}

#[pyfunction]
fn run(py: Python<'_>, config: PyRef<'_, PyConfig>) -> PyResult<PyRunResult> {
    let cfg = config.inner.clone();
    let inner = py.detach(|| run_experiment(&cfg)).map_err(py_err)?;
    Ok(PyRunResult { inner })
}

/// The configured workload in trace-file text form.
#[pyfunction]
fn generate_trace(config: PyRef<'_, PyConfig>) -> PyResult<String> {
    let txns = generate(&config.inner.workload).map_err(py_err)?;
    Ok(format_trace(config.inner.workload.n_contracts, &txns))
}

/// Number of transactions in a trace, after validating it.
#[pyfunction]
fn count_trace(text: &str) -> PyResult<usize> {
    Ok(parse_trace(text).map_err(py_err)?.txns.len())
}

/// Probability that a shard of `shard_size` nodes drawn from `total_nodes`,
/// `malicious` of them Byzantine, exceeds the fault threshold.
#[pyfunction]
#[pyo3(signature = (total_nodes, shard_size, malicious, threshold = "1/3"))]
fn shard_failure_probability(total_nodes: u64, shard_size: u64, malicious: u64, threshold: &str) -> PyResult<f64> {
    let v: FaultThreshold = threshold.parse().map_err(py_err)?;
    prophet_core::simnet::shard_failure_probability(total_nodes, shard_size, malicious, v).map_err(py_err)
}

#[pymodule]
fn prophet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyRunResult>()?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(generate_trace, m)?)?;
    m.add_function(wrap_pyfunction!(count_trace, m)?)?;
    m.add_function(wrap_pyfunction!(shard_failure_probability, m)?)?;
    Ok(())
}
