//! Python bindings: streams, the source model, controllers, the loss and
//! the experiment runner.

use std::path::PathBuf;

use fastslow_tta::harness::{self, RunConfig};
use fastslow_tta::model::{greedy_ctc_decode, LogitMatrix};
use fastslow_tta::objective::suta_loss_from_logits;
use fastslow_tta::stream::{self as st, StreamSpec};
use fastslow_tta::{FeatureSequence, ParamSet, TtaError};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(err: TtaError) -> PyErr {
    let msg = format!("[{}] {err}", err.category());
    match err {
        TtaError::Io(_) => PyIOError::new_err(msg),
        TtaError::NonFinite { .. } => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

fn features(rows: Vec<Vec<f64>>) -> PyResult<FeatureSequence> {
    FeatureSequence::from_rows(&rows).map_err(to_py)
}

fn rows(x: &FeatureSequence) -> Vec<Vec<f64>> {
    x.frames().map(|f| f.to_vec()).collect()
}

fn logits(rows: Vec<Vec<f64>>) -> PyResult<LogitMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    let n = rows.len();
    LogitMatrix::new(rows.into_iter().flatten().collect(), n, cols).map_err(to_py)
}

type UtteranceTuple = (u64, String, Vec<Vec<f64>>, Vec<usize>);

/// Linear frame classifier parameters (`dim × classes` weight, bias).
#[pyclass(name = "Params", from_py_object)]
#[derive(Clone)]
struct PyParams(ParamSet);

#[pymethods]
impl PyParams {
    #[new]
    fn new(weight: Vec<f64>, bias: Vec<f64>, dim: usize, classes: usize) -> PyResult<Self> {
        ParamSet::new(weight, bias, dim, classes).map(Self).map_err(to_py)
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes()
    }

    #[getter]
    fn weight(&self) -> Vec<f64> {
        self.0.weight().to_vec()
    }

    #[getter]
    fn bias(&self) -> Vec<f64> {
        self.0.bias().to_vec()
    }

    /// Frame logits for a `frames × dim` feature matrix.
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let out = fastslow_tta::model::forward(&self.0, &features(x)?).map_err(to_py)?;
        Ok(out.iter_rows().map(|r| r.to_vec()).collect())
    }
}

#[pyclass(name = "StreamSpec", from_py_object)]
#[derive(Clone)]
struct PyStreamSpec(StreamSpec);

#[pymethods]
impl PyStreamSpec {
    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        StreamSpec::from_toml_str(text).map(Self).map_err(to_py)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        StreamSpec::load(&path).map(Self).map_err(to_py)
    }

    #[getter]
    fn name(&self) -> String {
        self.0.name.clone()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.to_toml_string().map_err(to_py)
    }

    #[pyo3(signature = (seed=None))]
    fn build(&self, seed: Option<u64>) -> PyResult<PyStream> {
        st::build_stream_seeded(&self.0, seed.unwrap_or(self.0.seed)).map(PyStream).map_err(to_py)
    }

    /// Fit the source model on clean utterances of this spec's task.
    #[pyo3(signature = (utterances=2000, seed=99))]
    fn fit_source_model(&self, utterances: usize, seed: u64) -> PyResult<PyParams> {
        st::fit_source_model(&self.0.task, utterances, seed).map(PyParams).map_err(to_py)
    }
}

#[pyclass(name = "Stream")]
struct PyStream(st::Stream);

#[pymethods]
impl PyStream {
    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn boundaries(&self) -> Vec<u64> {
        self.0.boundaries.iter().copied().collect()
    }

    /// `(t, domain_id, features, reference)` of the utterance at `index`.
    fn utterance(&self, index: usize) -> PyResult<UtteranceTuple> {
        let u =
            self.0.utterances.get(index).ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))?;
        Ok((u.t, u.domain_id.clone(), rows(&u.features), u.reference.0.clone()))
    }
}

/// An online adaptation controller built from a run config.
#[pyclass(name = "Controller", unsendable)]
struct PyController(Box<dyn fastslow_tta::controllers::Controller + Send>);

#[pymethods]
impl PyController {
    /// `config` is run-config TOML; the `stream` key is not needed.
    /// `boundaries` feeds the oracle reset strategy.
    #[new]
    #[pyo3(signature = (params, config, boundaries=Vec::new()))]
    fn new(params: PyParams, config: &str, boundaries: Vec<u64>) -> PyResult<Self> {
        let cfg = RunConfig::from_toml_str(config).map_err(to_py)?;
        let b = boundaries.into_iter().collect();
        harness::build_controller(&cfg, &params.0, &b).map(Self).map_err(to_py)
    }

    /// Adapt on one utterance and return its outcome as a dict.
    fn step<'py>(&mut self, py: Python<'py>, x: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
        let out = self.0.step(&features(x)?).map_err(to_py)?;
        let d = PyDict::new(py);
        d.set_item("prediction", out.prediction.0)?;
        d.set_item("adapted_loss_trace", out.adapted_loss_trace)?;
        d.set_item("meta_updated", out.meta_updated)?;
        d.set_item("reset_fired", out.reset_fired)?;
        d.set_item("lii", out.lii)?;
        d.set_item("z", out.detector_event.map(|e| e.z))?;
        Ok(d)
    }

    /// `(forwards, backwards)` so far.
    #[getter]
    fn counters(&self) -> (u64, u64) {
        let c = self.0.counters();
        (c.forwards, c.backwards)
    }

    #[getter]
    fn position(&self) -> u64 {
        self.0.position()
    }
}

/// `(em, mcc, total)` of the adaptation objective on frame logits.
#[pyfunction]
#[pyo3(signature = (logits_rows, alpha=0.3, temperature=2.5))]
fn suta_loss(logits_rows: Vec<Vec<f64>>, alpha: f64, temperature: f64) -> PyResult<(f64, f64, f64)> {
    let l = suta_loss_from_logits(&logits(logits_rows)?, alpha, temperature).map_err(to_py)?;
    Ok((l.em, l.mcc, l.total))
}

#[pyfunction]
#[pyo3(signature = (logits_rows, blank=0))]
fn greedy_decode(logits_rows: Vec<Vec<f64>>, blank: usize) -> PyResult<Vec<usize>> {
    Ok(greedy_ctc_decode(&logits(logits_rows)?, blank).0)
}

#[pyfunction]
fn token_error_rate(hyp: Vec<usize>, reference: Vec<usize>) -> Option<f64> {
    harness::token_error_rate(&hyp, &reference)
}

/// Run a run-config file; returns the summary as a dict. When `output` is
/// given the full report directory is written there.
#[pyfunction]
#[pyo3(signature = (config_path, output=None))]
fn run_experiment<'py>(py: Python<'py>, config_path: PathBuf, output: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, spec) = harness::load_run(&config_path).map_err(to_py)?;
    let report = py.detach(|| harness::run_experiment(&cfg, &spec)).map_err(to_py)?;
    if let Some(dir) = output {
        harness::write_report(&report, &dir).map_err(to_py)?;
    }
    let json = serde_json::to_string(&report).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (json,))
}

#[pymodule]
#[pyo3(name = "fastslow_tta")]
fn extension_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyParams>()?;
    m.add_class::<PyStreamSpec>()?;
    m.add_class::<PyStream>()?;
    m.add_class::<PyController>()?;
    m.add_function(wrap_pyfunction!(suta_loss, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(token_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(run_experiment, m)?)?;
    Ok(())
}
