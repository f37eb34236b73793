//! Python bindings: the data helpers, loss and schedule functions, the
//! evaluation metrics, and `Corpus` / `Trainer` classes wrapping a training
//! run.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use carl_core::config;
use carl_core::data::{self, LabelScale};
use carl_core::encoder;
use carl_core::eval;
use carl_core::mccl;
use carl_core::ptd;
use carl_core::trainer::{self, RunOptions, TrainState};
use carl_core::CarlError;

create_exception!(carl, NumericError, PyException);

fn to_py(e: CarlError) -> PyErr {
    match e {
        CarlError::Io { .. } => PyOSError::new_err(e.to_string()),
        CarlError::Numeric { .. } => NumericError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for carl_core::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

/// Min-max maps `x` from `[lo, hi]` onto `[-1, 1]`.
#[pyfunction]
fn normalize_labels(x: f64, lo: f64, hi: f64) -> PyResult<f64> {
    data::normalize_labels(x, lo, hi).py()
}

/// Byte-level token ids (CLS first, PAD fill) and the attention mask.
#[pyfunction]
fn tokenize(text: &str, max_len: usize) -> PyResult<(Vec<u32>, Vec<u32>)> {
    let (ids, mask) = data::tokenize(text, max_len).py()?;
    // a Vec<u8> would surface as `bytes`
    Ok((ids, mask.into_iter().map(u32::from).collect()))
}

#[pyfunction]
fn detokenize(ids: Vec<u32>) -> String {
    data::detokenize(&ids)
}

/// Target-network momentum at step `k` of `total`.
#[pyfunction]
fn momentum_schedule(k: usize, total: usize, m_initial: f64) -> PyResult<f64> {
    mccl::momentum_schedule(k, total, m_initial).py()
}

#[pyfunction]
#[pyo3(signature = (p, labels, valid, gamma = 2.0))]
fn focal_loss(p: Vec<f64>, labels: Vec<u8>, valid: Vec<u8>, gamma: f64) -> PyResult<f64> {
    ptd::focal_loss(&p, &labels, &valid, gamma).py()
}

#[pyfunction]
fn total_loss(l_mccl: f64, l_ptd: f64, lambda1: f64, lambda2: f64) -> PyResult<f64> {
    trainer::total_loss(l_mccl, l_ptd, lambda1, lambda2).py()
}

/// `{"mae", "pearson_r", "spearman_rho"}`; the correlations are `None` when a
/// side is constant.
#[pyfunction]
fn correlation_stats<'py>(py: Python<'py>, pred: Vec<f64>, truth: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let out = PyDict::new(py);
    match eval::correlation_stats(&pred, &truth).py()? {
        Ok(s) => {
            out.set_item("mae", s.mae)?;
            out.set_item("pearson_r", s.pearson_r)?;
            out.set_item("spearman_rho", s.spearman_rho)?;
        }
        Err(u) => {
            out.set_item("mae", u.mae)?;
            out.set_item("pearson_r", py.None())?;
            out.set_item("spearman_rho", py.None())?;
        }
    }
    Ok(out)
}

#[pyfunction]
fn alignment(embeddings: Vec<Vec<f64>>, pairs: Vec<(usize, usize)>) -> PyResult<f64> {
    eval::alignment(&embeddings, &pairs).py()
}

#[pyfunction]
fn uniformity(embeddings: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::uniformity(&embeddings).py()
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    eval::roc_auc(&scores, &labels).py()
}

#[pyfunction]
#[pyo3(signature = (task, embeddings, targets, seed = 0))]
fn regression_probe<'py>(py: Python<'py>, task: &str, embeddings: Vec<Vec<f64>>, targets: Vec<f64>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = eval::regression_probe(task, &embeddings, &targets, seed).py()?;
    let out = PyDict::new(py);
    out.set_item("task", r.task)?;
    out.set_item("mae", r.mae)?;
    out.set_item("pearson_r", r.pearson_r)?;
    out.set_item("spearman_rho", r.spearman_rho)?;
    out.set_item("n_train", r.n_train)?;
    out.set_item("n_test", r.n_test)?;
    Ok(out)
}

#[pyfunction]
#[pyo3(signature = (task, embeddings, labels, seed = 0))]
fn classification_probe<'py>(py: Python<'py>, task: &str, embeddings: Vec<Vec<f64>>, labels: Vec<String>, seed: u64) -> PyResult<Bound<'py, PyDict>> {
    let r = eval::classification_probe(task, &embeddings, &labels, seed).py()?;
    let out = PyDict::new(py);
    out.set_item("task", r.task)?;
    out.set_item("classes", r.classes)?;
    out.set_item("accuracy", r.accuracy)?;
    out.set_item("macro_f1", r.macro_f1)?;
    out.set_item("confusion", r.confusion)?;
    Ok(out)
}

/// Labelled sentences on the common [-1, 1] scale.
#[pyclass(module = "carl")]
#[derive(Clone)]
struct Corpus {
    inner: data::Corpus,
}

#[pymethods]
impl Corpus {
    /// Reads a JSON-lines file whose labels live on `[lo, hi]`.
    #[staticmethod]
    #[pyo3(signature = (path, lo = -1.0, hi = 1.0))]
    fn load(path: PathBuf, lo: f64, hi: f64) -> PyResult<Self> {
        let scale = LabelScale::new(lo, hi).py()?;
        Ok(Corpus {
            inner: data::load_corpus(&path, scale).py()?,
        })
    }

    /// Four-quadrant synthetic corpus.
    #[staticmethod]
    #[pyo3(signature = (n_per_quadrant, noise = 0.1, seed = 0))]
    fn synthetic(n_per_quadrant: usize, noise: f64, seed: u64) -> PyResult<Self> {
        Ok(Corpus {
            inner: data::generate_synthetic(n_per_quadrant, &data::default_themes(), noise, seed).py()?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Corpus({} records)", self.inner.len())
    }

    #[getter]
    fn texts(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.text.clone()).collect()
    }

    /// `[valence, arousal]` per record.
    #[getter]
    fn labels(&self) -> Vec<[f64; 2]> {
        self.inner.labels()
    }

    #[getter]
    fn emotions(&self) -> Vec<Option<String>> {
        self.inner.records.iter().map(|r| r.emotion.clone()).collect()
    }

    /// Seeded `(train, held_out)` split; `fraction` is the held-out share.
    fn split(&self, fraction: f64, seed: u64) -> PyResult<(Corpus, Corpus)> {
        if !(0.0..=1.0).contains(&fraction) {
            return Err(PyValueError::new_err(format!("fraction {fraction} not in [0, 1]")));
        }
        let (a, b) = self.inner.split(fraction, seed);
        Ok((Corpus { inner: a }, Corpus { inner: b }))
    }

    fn write_jsonl(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write_jsonl(&path).py()
    }
}

/// A training run: online and target encoders, optimizer state and schedule.
#[pyclass(module = "carl")]
struct Trainer {
    state: TrainState,
    train: data::Corpus,
}

fn row_dict<'py>(py: Python<'py>, r: &trainer::MetricsRow) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("step", r.step)?;
    d.set_item("l_mccl", r.l_mccl)?;
    d.set_item("l_ptd", r.l_ptd)?;
    d.set_item("l_total", r.l_total)?;
    d.set_item("lr", r.lr)?;
    d.set_item("momentum", r.momentum)?;
    d.set_item("eval_r_valence", r.eval_r_valence)?;
    d.set_item("eval_r_arousal", r.eval_r_arousal)?;
    Ok(d)
}

#[pymethods]
impl Trainer {
    /// `overrides` are `section.key=value` strings, e.g. `"train.lambda2=0"`.
    #[new]
    #[pyo3(signature = (corpus, preset = "smoke", overrides = Vec::new(), seed = None))]
    fn new(corpus: &Corpus, preset: &str, mut overrides: Vec<String>, seed: Option<u64>) -> PyResult<Self> {
        if let Some(s) = seed {
            overrides.push(format!("train.seed={s}"));
        }
        let cfg = config::resolve(None, Some(preset), &overrides).py()?.carl();
        let total = trainer::planned_steps(&corpus.inner, &cfg).py()?;
        Ok(Trainer {
            state: TrainState::new(cfg, total).py()?,
            train: corpus.inner.clone(),
        })
    }

    /// Restores a checkpoint to continue training on `corpus`.
    #[staticmethod]
    fn resume(path: PathBuf, corpus: &Corpus) -> PyResult<Self> {
        Ok(Trainer {
            state: trainer::load_checkpoint(&path).py()?,
            train: corpus.inner.clone(),
        })
    }

    #[getter]
    fn step(&self) -> usize {
        self.state.k
    }

    #[getter]
    fn total_steps(&self) -> usize {
        self.state.total
    }

    #[getter]
    fn finished(&self) -> bool {
        self.state.is_finished()
    }

    /// Trains up to `max_steps` total steps (or to the end), evaluating on
    /// `eval_corpus` if given. Returns one dict per step taken.
    #[pyo3(signature = (max_steps = None, eval_corpus = None))]
    fn train<'py>(&mut self, py: Python<'py>, max_steps: Option<usize>, eval_corpus: Option<&Corpus>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        let eval = eval_corpus.map(|c| c.inner.clone());
        let (state, train) = (&mut self.state, &self.train);
        let rows = py
            .allow_threads(|| {
                trainer::run_training(
                    state,
                    train,
                    eval.as_ref(),
                    RunOptions {
                        max_steps,
                        ..RunOptions::default()
                    },
                )
            })
            .py()?;
        rows.iter().map(|r| row_dict(py, r)).collect()
    }

    /// Sentence embeddings of the online encoder.
    fn embed(&self, py: Python<'_>, corpus: &Corpus) -> PyResult<Vec<Vec<f64>>> {
        let (state, c) = (&self.state, &corpus.inner);
        py.allow_threads(|| encoder::embed_corpus(&state.online, &state.config.encoder, c, 64)).py()
    }

    /// Held-out detection probabilities and whether each token was perturbed.
    #[pyo3(signature = (corpus, batch_size = 16, seed = 0))]
    fn detection_scores(&self, py: Python<'_>, corpus: &Corpus, batch_size: usize, seed: u64) -> PyResult<(Vec<f64>, Vec<bool>)> {
        let (state, c) = (&self.state, &corpus.inner);
        py.allow_threads(|| trainer::detection_scores(state, c, batch_size, seed)).py()
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        trainer::save_checkpoint(&self.state, &path).py()
    }
}

#[pymodule]
#[pyo3(name = "carl")]
fn carl_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NumericError", m.py().get_type::<NumericError>())?;
    m.add_function(wrap_pyfunction!(normalize_labels, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add_function(wrap_pyfunction!(momentum_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(focal_loss, m)?)?;
    m.add_function(wrap_pyfunction!(total_loss, m)?)?;
    m.add_function(wrap_pyfunction!(correlation_stats, m)?)?;
    m.add_function(wrap_pyfunction!(alignment, m)?)?;
    m.add_function(wrap_pyfunction!(uniformity, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(regression_probe, m)?)?;
    m.add_function(wrap_pyfunction!(classification_probe, m)?)?;
    m.add_class::<Corpus>()?;
    m.add_class::<Trainer>()?;
    Ok(())
}
