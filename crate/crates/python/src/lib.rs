//! Python bindings: configs, the pipeline commands, checkpoints, streaming
//! inference and the metrics.

use std::collections::HashMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyKeyError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use muse_core::config::{RunConfig, KEYS};
use muse_core::datamodel::{ContentType, InteractionRow};
use muse_core::features::FeatureContext;
use muse_core::metrics;
use muse_core::muse_global::{GlobalModel, UserStreamState};
use muse_core::pipeline::{self, AnyModel, ModelKind};
use muse_core::simgen::{self, SimConfig};
use muse_core::MuseError;

fn err(e: MuseError) -> PyErr {
    match e {
        MuseError::InvalidArgument(_) | MuseError::Config { .. } | MuseError::SingleClass => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

/// Run configuration; keys and defaults as listed by `Config.keys()`.
#[pyclass(name = "Config", module = "muse")]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (path=None, **overrides))]
    fn new(path: Option<PathBuf>, overrides: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let inner = match path {
            Some(p) => RunConfig::from_file(&p).map_err(err)?,
            None => RunConfig::default(),
        };
        let mut c = PyConfig { inner };
        if let Some(kw) = overrides {
            for (k, v) in kw.iter() {
                // Python identifiers cannot hold dots; `local__d_model` means `local.d_model`.
                c.set(&k.extract::<String>()?.replace("__", "."), &v)?;
            }
        }
        Ok(c)
    }

    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<()> {
        let text = value.str()?.to_string();
        self.inner.set(key, &text).map_err(|m| {
            if m.starts_with("unknown") {
                PyKeyError::new_err(m)
            } else {
                PyValueError::new_err(format!("{key}: {m}"))
            }
        })
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner.get(key).ok_or_else(|| PyKeyError::new_err(format!("unknown key `{key}`")))
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    /// `(key, default, description)` for every accepted key.
    #[staticmethod]
    fn keys() -> Vec<(&'static str, &'static str, &'static str)> {
        KEYS.to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Config(data_dir={:?}, out_dir={:?}, seed={})", self.inner.data_dir, self.inner.out_dir, self.inner.seed)
    }
}

fn threaded<T: Send>(cfg: &RunConfig, f: impl FnOnce() -> muse_core::Result<T> + Send) -> PyResult<T> {
    pipeline::with_threads(cfg.threads, f).map_err(err)?.map_err(err)
}

/// Writes a synthetic dataset into `config.data_dir`; returns the directory.
#[pyfunction]
fn generate(py: Python<'_>, config: &PyConfig) -> PyResult<PathBuf> {
    let c = config.inner.clone();
    py.detach(|| threaded(&c, || pipeline::generate(&c)))
}

/// Trains `model` ("local" or "global"); returns the final checkpoint path.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig, model: &str) -> PyResult<PathBuf> {
    let kind = ModelKind::parse(model).map_err(err)?;
    let c = config.inner.clone();
    py.detach(|| threaded(&c, || pipeline::train(&c, kind, &pipeline::load_prepared(&c)?)))
}

/// Adversarial fine-tuning of a local checkpoint; returns the new checkpoint.
#[pyfunction]
fn finetune_adv(py: Python<'_>, config: &PyConfig, checkpoint: PathBuf) -> PyResult<PathBuf> {
    let c = config.inner.clone();
    py.detach(|| threaded(&c, || Ok(pipeline::finetune_adv(&c, &checkpoint, &pipeline::load_prepared(&c)?)?.0)))
}

/// Held-out metrics of a checkpoint as a dict.
#[pyfunction]
fn evaluate(py: Python<'_>, config: &PyConfig, checkpoint: PathBuf) -> PyResult<HashMap<&'static str, f64>> {
    let c = config.inner.clone();
    let r = py.detach(|| threaded(&c, || pipeline::evaluate(&c, &checkpoint, &pipeline::load_prepared(&c)?)))?;
    Ok(HashMap::from([
        ("auc", r.auc),
        ("accuracy", r.accuracy),
        ("logloss", r.logloss),
        ("n_positive", r.n_positive as f64),
        ("n_negative", r.n_negative as f64),
    ]))
}

/// Out-of-fold fusion; returns the component and fused AUCs.
#[pyfunction]
fn blend(py: Python<'_>, config: &PyConfig, local: PathBuf, global: PathBuf) -> PyResult<HashMap<&'static str, f64>> {
    let c = config.inner.clone();
    let out = py.detach(|| threaded(&c, || pipeline::blend(&c, &local, &global, &pipeline::load_prepared(&c)?)))?;
    let r = out.report;
    Ok(HashMap::from([
        ("auc_local", r.auc_local),
        ("auc_global", r.auc_global),
        ("auc_fused", r.auc_fused),
        ("rows", r.n_rows as f64),
    ]))
}

/// Scores every question row of an interactions file into `output`;
/// returns the number of predictions.
#[pyfunction]
fn predict(py: Python<'_>, config: &PyConfig, checkpoint: PathBuf, input: PathBuf, output: PathBuf) -> PyResult<usize> {
    let c = config.inner.clone();
    py.detach(|| threaded(&c, || pipeline::predict(&c, &checkpoint, &input, &output)))
}

/// AUC of the generator's true probabilities for a config's `sim.*` keys.
#[pyfunction]
fn oracle_auc(config: &PyConfig) -> PyResult<f64> {
    simgen::generate(&config.inner.sim_config()).and_then(|o| o.oracle_auc()).map_err(err)
}

/// Generates a dataset directly into `out_dir` from keyword overrides of
/// the generator settings; returns the oracle AUC.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=42, n_users=None, n_questions=None, mean_interactions=None))]
fn simulate(
    out_dir: PathBuf,
    seed: u64,
    n_users: Option<usize>,
    n_questions: Option<usize>,
    mean_interactions: Option<f64>,
) -> PyResult<f64> {
    let d = SimConfig::default();
    let cfg = SimConfig {
        seed,
        n_users: n_users.unwrap_or(d.n_users),
        n_questions: n_questions.unwrap_or(d.n_questions),
        mean_interactions: mean_interactions.unwrap_or(d.mean_interactions),
        ..d
    };
    let out = simgen::generate(&cfg).map_err(err)?;
    out.write(&out_dir).map_err(err)?;
    out.oracle_auc().map_err(err)
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::roc_auc(&scores, &labels).map_err(err)
}

#[pyfunction]
fn logloss(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    metrics::logloss(&scores, &labels).map_err(err)
}

/// A trained local or global model loaded from a checkpoint.
#[pyclass(name = "Checkpoint", module = "muse")]
struct PyCheckpoint {
    model: AnyModel,
    meta: Vec<(String, String)>,
}

#[pymethods]
impl PyCheckpoint {
    #[new]
    fn new(path: PathBuf) -> PyResult<Self> {
        let (model, archive) = AnyModel::load(&path).map_err(err)?;
        let meta = archive.meta;
        Ok(PyCheckpoint { model, meta })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.model.kind().name()
    }

    #[getter]
    fn meta(&self) -> HashMap<String, String> {
        self.meta.iter().cloned().collect()
    }

    #[getter]
    fn n_parameters(&self) -> usize {
        let store = match &self.model {
            AnyModel::Local(m) => m.store(),
            AnyModel::Global(m) => &m.store,
        };
        store.iter().map(|(_, p)| p.value.len()).sum()
    }
}

fn content_type(s: &str) -> PyResult<ContentType> {
    match s {
        "question" | "0" => Ok(ContentType::Question),
        "lecture" | "1" => Ok(ContentType::Lecture),
        _ => Err(PyValueError::new_err(format!("content_type must be `question` or `lecture`, got `{s}`"))),
    }
}

/// One-row-at-a-time predictions of a global checkpoint. Each user keeps
/// its own recurrent state; rows must arrive in time order per user.
#[pyclass(name = "Stream", module = "muse")]
struct PyStream {
    model: GlobalModel,
    ctx: FeatureContext,
    users: HashMap<u64, UserStreamState>,
}

#[pymethods]
impl PyStream {
    #[new]
    fn new(config: &PyConfig, checkpoint: PathBuf) -> PyResult<Self> {
        let (model, _) = AnyModel::load(&checkpoint).map_err(err)?;
        let AnyModel::Global(model) = model else {
            return Err(PyValueError::new_err("streaming needs a global checkpoint"));
        };
        let ctx = pipeline::feature_context(&config.inner).map_err(err)?;
        Ok(PyStream { model, ctx, users: HashMap::new() })
    }

    /// Feeds one event. Returns the probability of a correct answer for a
    /// question row (computed before its answer is seen) and None for a
    /// lecture.
    #[allow(clippy::too_many_arguments)]
    #[pyo3(signature = (row_id, timestamp, user_id, content_id, content_type="question", task_container_id=0,
                        user_answer=None, answered_correctly=None, prior_elapsed_time=None, prior_had_explanation=None))]
    fn advance(
        &mut self,
        row_id: u64,
        timestamp: u64,
        user_id: u64,
        content_id: u32,
        content_type: &str,
        task_container_id: u32,
        user_answer: Option<u8>,
        answered_correctly: Option<u8>,
        prior_elapsed_time: Option<f64>,
        prior_had_explanation: Option<bool>,
    ) -> PyResult<Option<f64>> {
        let row = InteractionRow {
            row_id,
            timestamp,
            user_id,
            content_id,
            content_type: self::content_type(content_type)?,
            task_container_id,
            user_answer,
            answered_correctly,
            prior_elapsed_time,
            prior_had_explanation,
        };
        let state = self.users.entry(user_id).or_insert_with(|| UserStreamState::new(&self.model));
        state.advance(&self.model, &self.ctx, &row).map_err(err)
    }

    fn forget(&mut self, user_id: u64) {
        self.users.remove(&user_id);
    }

    fn __len__(&self) -> usize {
        self.users.len()
    }
}

#[pymodule]
pub fn muse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyStream>()?;
    m.add_function(wrap_pyfunction!(generate, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(finetune_adv, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(blend, m)?)?;
    m.add_function(wrap_pyfunction!(predict, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_auc, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(logloss, m)?)?;
    Ok(())
}
