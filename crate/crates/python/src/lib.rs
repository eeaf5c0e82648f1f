//! Python bindings. Structured values cross the boundary as plain Python
//! dicts and lists; events are dicts with `time`, `user`, `words` and
//! optionally `true_pattern` / `true_task`.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::Serialize;

use hdhp::evaluation;
use hdhp::generative::{self, Hyperparams, SyntheticConfig};
use hdhp::io::{self, Dataset};
use hdhp::point_process::{self, KernelParams, MarkedEvent, UserHawkes};
use hdhp::smc::{self, InferenceResult};
use hdhp::HdhpError;

fn err(e: HdhpError) -> PyErr {
    match e {
        HdhpError::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_py<T: DeserializeOwned>(obj: &Bound<'_, PyAny>) -> PyResult<T> {
    let text: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&text).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn dataset_from_py(events: &Bound<'_, PyAny>, vocab: Option<&[String]>) -> PyResult<Dataset> {
    let json = events.py().import("json")?;
    let mut text = String::new();
    for item in events.try_iter()? {
        let line: String = json.call_method1("dumps", (item?,))?.extract()?;
        text.push_str(&line);
        text.push('\n');
    }
    io::read_events(text.as_bytes(), Path::new("<python>"), vocab).map_err(err)
}

fn dataset_to_py<'py>(py: Python<'py>, data: &Dataset) -> PyResult<Bound<'py, PyList>> {
    let records: Vec<_> = data.events.iter().map(|e| data.record(e)).collect();
    Ok(to_py(py, &records)?.cast_into::<PyList>()?)
}

fn kernel(alpha: f64, nu: f64) -> PyResult<KernelParams> {
    KernelParams::new(alpha, nu).map_err(err)
}

/// `α·exp(-ν·elapsed)`.
#[pyfunction]
fn kernel_value(alpha: f64, nu: f64, elapsed: f64) -> PyResult<f64> {
    point_process::kernel_value(&kernel(alpha, nu)?, elapsed).map_err(err)
}

/// Decays an excitation sum over `gap` and optionally adds a new event.
#[pyfunction]
#[pyo3(signature = (sum, gap, nu, add_event=true))]
fn excitation_update(sum: f64, gap: f64, nu: f64, add_event: bool) -> PyResult<f64> {
    point_process::excitation_update(sum, gap, nu, add_event).map_err(err)
}

/// Expected intensity at `t` of a task stream started by rate `mu_pi`.
#[pyfunction]
fn expected_intensity(mu_pi: f64, alpha: f64, nu: f64, t: f64) -> PyResult<f64> {
    point_process::expected_intensity(mu_pi, &kernel(alpha, nu)?, t).map_err(err)
}

/// Expected number of events in `[0, horizon]`.
#[pyfunction]
fn expected_count(mu_pi: f64, alpha: f64, nu: f64, horizon: f64) -> PyResult<f64> {
    point_process::expected_count(mu_pi, &kernel(alpha, nu)?, horizon).map_err(err)
}

/// Log-likelihood of one user's task-marked events on `[0, horizon)`.
/// `events` is a list of `(time, task, pattern)` tuples.
#[pyfunction]
fn log_likelihood(events: Vec<(f64, usize, usize)>, mu: f64, alphas: Vec<f64>, nu: f64, horizon: f64) -> PyResult<f64> {
    let events: Vec<MarkedEvent> = events
        .into_iter()
        .map(|(time, task, pattern)| MarkedEvent { time, task, pattern })
        .collect();
    point_process::log_likelihood(&events, &UserHawkes { mu, alphas, nu }, horizon).map_err(err)
}

/// Normalized mutual information between two labelings.
#[pyfunction]
fn nmi(labels_a: Vec<usize>, labels_b: Vec<usize>) -> PyResult<f64> {
    evaluation::nmi(&labels_a, &labels_b).map_err(err)
}

/// `exp(-mean(logliks))`.
#[pyfunction]
fn perplexity(logliks: Vec<f64>) -> PyResult<f64> {
    evaluation::perplexity(&logliks).map(|p| p.value).map_err(err)
}

/// Simulates a synthetic stream. `config` is a dict of synthetic settings;
/// missing keys take defaults. Returns `(events, truth)`.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn generate<'py>(
    py: Python<'py>,
    config: Option<&Bound<'py, PyDict>>,
    seed: Option<u64>,
) -> PyResult<(Bound<'py, PyList>, Bound<'py, PyAny>)> {
    let mut cfg: SyntheticConfig = match config {
        Some(c) => from_py(c.as_any())?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (events, truth) = py.detach(|| generative::generate(&cfg, &mut rng)).map_err(err)?;
    let data = Dataset {
        events,
        users: truth.users.clone(),
        vocab: truth.vocab.clone(),
    };
    Ok((dataset_to_py(py, &data)?, to_py(py, &truth)?))
}

/// Reads a JSONL events file into a list of dicts.
#[pyfunction]
fn load_events<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyList>> {
    dataset_to_py(py, &io::load_events(&path, None).map_err(err)?)
}

/// Fits the model to `events` (sorted by time). `hyper` is a dict of
/// hyperparameters; missing keys take defaults.
#[pyfunction]
#[pyo3(signature = (events, hyper=None, particles=None, seed=None, threads=None))]
fn fit(
    py: Python<'_>,
    events: &Bound<'_, PyAny>,
    hyper: Option<&Bound<'_, PyDict>>,
    particles: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
) -> PyResult<Model> {
    let mut h: Hyperparams = match hyper {
        Some(d) => from_py(d.as_any())?,
        None => Hyperparams::default(),
    };
    if let Some(p) = particles {
        h.particles = p;
    }
    if let Some(s) = seed {
        h.seed = s;
    }
    let fixed = (!h.vocab.is_empty()).then(|| h.vocab.clone());
    let data = dataset_from_py(events, fixed.as_deref())?;
    h.vocab = data.vocab.clone();
    let inner = py
        .detach(|| smc::fit(&data.events, &data.users, &h, threads))
        .map_err(err)?;
    Ok(Model { inner })
}

/// A fitted model.
#[pyclass(module = "hdhp_py", frozen)]
struct Model {
    inner: InferenceResult,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: io::load_snapshot(&path).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        io::save_snapshot(&self.inner, &path).map_err(err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: io::snapshot_from_str(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        io::snapshot_to_string(&self.inner).map_err(err)
    }

    #[getter]
    fn users(&self) -> Vec<String> {
        self.inner.users.clone()
    }

    #[getter]
    fn vocab(&self) -> Vec<String> {
        self.inner.vocab().to_vec()
    }

    #[getter]
    fn alphas(&self) -> Vec<f64> {
        self.inner.alphas()
    }

    #[getter]
    fn mus(&self) -> Vec<f64> {
        self.inner.mus()
    }

    #[getter]
    fn n_patterns(&self) -> usize {
        self.inner.patterns.len()
    }

    #[getter]
    fn total_tasks(&self) -> u64 {
        self.inner.total_tasks
    }

    #[getter]
    fn end_time(&self) -> f64 {
        self.inner.end_time
    }

    /// Cumulative log evidence after every training event.
    #[getter]
    fn log_evidence(&self) -> Vec<f64> {
        self.inner.log_evidence.clone()
    }

    /// Pattern of every training event.
    #[getter]
    fn pattern_labels(&self) -> Vec<usize> {
        self.inner.pattern_labels()
    }

    /// Task of every training event.
    #[getter]
    fn task_labels(&self) -> Vec<usize> {
        self.inner.assignments.iter().map(|a| a.task).collect()
    }

    /// Posterior-mean word distribution of a pattern.
    fn theta(&self, pattern: usize) -> PyResult<Vec<f64>> {
        if pattern >= self.inner.patterns.len() {
            return Err(PyValueError::new_err(format!("no pattern {pattern}")));
        }
        Ok(self.inner.theta(pattern))
    }

    /// Scores held-out events that follow the training period.
    fn evaluate<'py>(&self, py: Python<'py>, events: &Bound<'py, PyAny>) -> PyResult<Bound<'py, PyAny>> {
        let data = dataset_from_py(events, Some(self.inner.vocab()))?;
        let held = py
            .detach(|| evaluation::evaluate_heldout(&self.inner, &data.events, &data.users))
            .map_err(err)?;
        to_py(py, &held)
    }

    #[pyo3(signature = (top_words=10))]
    fn pattern_report<'py>(&self, py: Python<'py>, top_words: usize) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &evaluation::pattern_report(&self.inner, top_words).map_err(err)?)
    }

    fn user_report<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let events = self.inner.training_events();
        to_py(py, &evaluation::user_report(&self.inner, &events).map_err(err)?)
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(users={}, patterns={}, tasks={}, events={})",
            self.inner.users.len(),
            self.inner.patterns.len(),
            self.inner.total_tasks,
            self.inner.assignments.len()
        )
    }
}

#[pymodule]
fn hdhp_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(kernel_value, m)?)?;
    m.add_function(wrap_pyfunction!(excitation_update, m)?)?;
    m.add_function(wrap_pyfunction!(expected_intensity, m)?)?;
    m.add_function(wrap_pyfunction!(expected_count, m)?)?;
    m.add_function(wrap_pyfunction!(log_likelihood, m)?)?;
    m.add_function(wrap_pyfunction!(nmi, m)?)?;
    m.add_function(wrap_pyfunction!(perplexity, m)?)?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(load_events, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_class::<Model>()?;
    Ok(())
}
