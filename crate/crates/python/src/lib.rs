//! Python bindings: config handling, synthetic data, training, prediction,
//! metrics and the gradient check suite.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use sma_core::config::RunConfig;
use sma_core::data::{generate_synthetic, load_samples, split_grouped, write_dataset, DatasetManifest, SequenceSample, CLASS_NAMES};
use sma_core::gradsuite::run_suite;
use sma_core::metrics::{self, ConfusionMatrix, ScoredSample};
use sma_core::model::SmaNet;
use sma_core::nn::ParamStore;
use sma_core::train::{evaluate, load_model, train_run};
use sma_core::{Error, OpKind};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait OrPyErr<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPyErr<T> for Result<T, Error> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Run configuration as dotted `key=value` pairs.
#[pyclass(name = "RunConfig", module = "smanet", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    /// Defaults, optionally overridden by `key=value` text.
    #[new]
    #[pyo3(signature = (text = None))]
    fn new(text: Option<&str>) -> PyResult<Self> {
        let inner = match text {
            Some(t) => RunConfig::parse(t).py()?,
            None => RunConfig::default(),
        };
        Ok(Self { inner })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::read(&path).py()?,
        })
    }

    fn get(&self, key: &str) -> PyResult<String> {
        self.inner
            .get(key)
            .ok_or_else(|| PyValueError::new_err(format!("unknown config key `{key}`")))
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).py()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().py()
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn __repr__(&self) -> String {
        format!("RunConfig({} keys)", self.inner.render().lines().count())
    }
}

fn config_or_default(config: Option<&PyRunConfig>) -> RunConfig {
    config.map(|c| c.inner.clone()).unwrap_or_default()
}

/// Writes a synthetic dataset to `out` and returns per-class counts.
#[pyfunction]
#[pyo3(signature = (out, config = None, seed = None))]
fn generate_dataset(out: PathBuf, config: Option<&PyRunConfig>, seed: Option<u64>) -> PyResult<BTreeMap<String, usize>> {
    let mut cfg = config_or_default(config);
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let dataset = generate_synthetic(&cfg.data).py()?;
    let manifest = write_dataset(&dataset, &out).py()?;
    Ok(CLASS_NAMES
        .iter()
        .zip(manifest.class_counts(3))
        .map(|(name, c)| (name.to_string(), c))
        .collect())
}

fn load_split(data: &std::path::Path, cfg: &RunConfig, split: &str) -> PyResult<Vec<SequenceSample>> {
    let manifest = DatasetManifest::read(data).py()?;
    let part = match split {
        "all" => manifest,
        "train" | "test" => {
            let (train, test) = split_grouped(&manifest, cfg.test_fraction, cfg.split_seed).py()?;
            if split == "train" {
                train
            } else {
                test
            }
        }
        other => return Err(PyValueError::new_err(format!("unknown split `{other}`; expected test, train or all"))),
    };
    load_samples(&part, cfg.model.num_classes).py()
}

/// Summary of a finished training run.
#[pyclass(name = "RunSummary", module = "smanet", get_all)]
struct PyRunSummary {
    train_losses: Vec<f64>,
    val_bacc: Vec<f64>,
    best_bacc: f64,
    best_epoch: usize,
    epochs_completed: usize,
}

/// Trains on the grouped train split of `data`, validating on the test split.
#[pyfunction]
#[pyo3(signature = (data, out, config = None, resume = None))]
fn train(py: Python<'_>, data: PathBuf, out: PathBuf, config: Option<&PyRunConfig>, resume: Option<PathBuf>) -> PyResult<PyRunSummary> {
    let cfg = config_or_default(config);
    cfg.validate().py()?;
    let train = load_split(&data, &cfg, "train")?;
    let val = load_split(&data, &cfg, "test")?;
    let (_, s) = py
        .detach(|| train_run(&out, &cfg, &train, &val, resume.as_deref()))
        .py()?;
    Ok(PyRunSummary {
        train_losses: s.train_losses,
        val_bacc: s.val_bacc,
        best_bacc: s.best_bacc,
        best_epoch: s.best_epoch,
        epochs_completed: s.epochs_completed,
    })
}

/// A trained model loaded from a checkpoint.
#[pyclass(name = "Model", module = "smanet")]
struct PyModel {
    model: SmaNet,
    store: ParamStore<f32>,
    run: RunConfig,
}

/// Probabilities for one sequence.
#[pyclass(name = "Prediction", module = "smanet", get_all)]
struct PyPrediction {
    class_index: usize,
    class_name: String,
    /// T rows of K per-slice probabilities.
    slice: Vec<Vec<f32>>,
    /// T rows of K sequence-head probabilities.
    sequence: Vec<Vec<f32>>,
    #[pyo3(name = "final")]
    final_: Vec<f32>,
}

fn rows(values: &[f32], k: usize) -> Vec<Vec<f32>> {
    values.chunks(k).map(<[f32]>::to_vec).collect()
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, store, run) = load_model(&path, None).py()?;
        Ok(Self { model, store, run })
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.model.config().seq_len
    }

    #[getter]
    fn input_size(&self) -> usize {
        self.model.config().input_size
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.model.config().num_classes
    }

    /// The run configuration stored in the checkpoint.
    #[getter]
    fn config(&self) -> PyRunConfig {
        PyRunConfig { inner: self.run.clone() }
    }

    /// Classifies one sequence given as `T*S*S` row-major pixels.
    fn predict(&self, pixels: Vec<f32>) -> PyResult<PyPrediction> {
        let cfg = self.model.config();
        let p = self.model.predict(&self.store, &pixels).py()?;
        let k = cfg.num_classes;
        let class_index = p.class_for(cfg.inference);
        let class_name = if k == 2 { ["open", "closed"][class_index] } else { CLASS_NAMES[class_index] };
        Ok(PyPrediction {
            class_index,
            class_name: class_name.to_string(),
            slice: rows(p.probs_slice.data(), k),
            sequence: rows(p.probs_seq.data(), k),
            final_: p.probs_final.data().to_vec(),
        })
    }

    /// Metrics on a split of a dataset directory (`test`, `train` or `all`).
    #[pyo3(signature = (data, split = "test"))]
    fn evaluate(&self, py: Python<'_>, data: PathBuf, split: &str) -> PyResult<BTreeMap<String, f64>> {
        let samples = load_split(&data, &self.run, split)?;
        let eval = py.detach(|| evaluate(&self.model, &self.store, &samples, split)).py()?;
        let r = eval.report;
        Ok(BTreeMap::from([
            ("kappa".to_string(), r.kappa),
            ("f1".to_string(), r.f1),
            ("b_acc".to_string(), r.b_acc),
            ("sen".to_string(), r.sen),
            ("spe".to_string(), r.spe),
            ("auc_narrow_synechiae".to_string(), r.auc_narrow_synechiae.unwrap_or(f64::NAN)),
        ]))
    }
}

fn confusion(truth: Vec<usize>, predicted: Vec<usize>, k: usize) -> PyResult<ConfusionMatrix> {
    ConfusionMatrix::from_predictions(&truth, &predicted, k).py()
}

#[pyfunction]
fn cohen_kappa(truth: Vec<usize>, predicted: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    metrics::cohen_kappa(&confusion(truth, predicted, num_classes)?).py()
}

#[pyfunction]
fn weighted_f1(truth: Vec<usize>, predicted: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    metrics::weighted_f1(&confusion(truth, predicted, num_classes)?).py()
}

#[pyfunction]
fn balanced_accuracy(truth: Vec<usize>, predicted: Vec<usize>, num_classes: usize) -> PyResult<f64> {
    metrics::balanced_accuracy(&confusion(truth, predicted, num_classes)?).py()
}

/// Support-weighted (sensitivity, specificity).
#[pyfunction]
fn weighted_sen_spe(truth: Vec<usize>, predicted: Vec<usize>, num_classes: usize) -> PyResult<(f64, f64)> {
    metrics::weighted_sen_spe(&confusion(truth, predicted, num_classes)?).py()
}

/// Area under the ROC curve with ties counted as half.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    if scores.len() != labels.len() {
        return Err(PyValueError::new_err(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let samples: Vec<ScoredSample> = scores.into_iter().zip(labels).map(|(s, l)| ScoredSample::new(s, l)).collect();
    metrics::roc_auc(&samples).py()
}

/// Runs the gradient check suite; returns `(name, max_rel_error, passed)` rows.
#[pyfunction]
#[pyo3(signature = (inject_fault = None))]
fn gradcheck(py: Python<'_>, inject_fault: Option<&str>) -> PyResult<Vec<(String, f64, bool)>> {
    let fault = inject_fault
        .map(|name| OpKind::from_name(name).ok_or_else(|| PyValueError::new_err(format!("unknown op `{name}`"))))
        .transpose()?;
    let rows = py.detach(|| run_suite(fault)).py()?;
    Ok(rows
        .iter()
        .map(|r| (r.name.to_string(), r.report.max_rel_error, r.passed()))
        .collect())
}

#[pymodule]
fn smanet(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyRunSummary>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyPrediction>()?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cohen_kappa, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_f1, m)?)?;
    m.add_function(wrap_pyfunction!(balanced_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(weighted_sen_spe, m)?)?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
