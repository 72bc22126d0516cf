//! Python bindings for the AFSL robustness laboratory.
//!
//! The module mirrors the library's main types and operations: dataset
//! generation, model training, the attack suite, and the evaluation
//! harness. Tensors cross the boundary as flat `list[float]` plus an
//! explicit shape, so no array dependency is required on either side.

use std::path::Path;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use afsl_core::attack::{self, AttackConfig};
use afsl_core::data::{self, Dataset as CoreDataset, DatasetConfig};
use afsl_core::error::Error;
use afsl_core::eval::{self, EvalCondition};
use afsl_core::model::{Classifier, ModelParams};
use afsl_core::tensor::{self, Tensor};
use afsl_core::train::{self, TrainConfig};

/// Converts a library error into the closest Python exception: bad
/// configuration or inputs become `ValueError`, artifact/IO problems become
/// `IOError`, numerical failures become `RuntimeError`.
fn to_py(err: Error) -> PyErr {
    match err.exit_code() {
        2 => PyValueError::new_err(err.to_string()),
        4 => PyIOError::new_err(err.to_string()),
        _ => PyRuntimeError::new_err(err.to_string()),
    }
}

fn tensor_from(data: Vec<f64>, shape: Vec<usize>) -> PyResult<Tensor> {
    Tensor::new(shape, data).map_err(to_py)
}

fn tensor_out(t: &Tensor) -> (Vec<f64>, Vec<usize>) {
    (t.data().to_vec(), t.shape().to_vec())
}

/// A trained (or freshly initialised) classifier with its parameters.
#[pyclass(name = "Model")]
struct PyModel {
    inner: ModelParams,
}

#[pymethods]
impl PyModel {
    /// Initialises a model of the named architecture for the given input
    /// shape `[channels, height, width]`.
    #[staticmethod]
    fn init(architecture: &str, input_shape: [usize; 3], seed: u64) -> PyResult<Self> {
        let arch =
            afsl_core::model::ArchitectureSpec::by_id(architecture, input_shape).map_err(to_py)?;
        Ok(PyModel { inner: afsl_core::model::init_params(&arch, seed).map_err(to_py)? })
    }

    /// Loads a checkpoint directory produced by `save` or the CLI.
    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(PyModel { inner: ModelParams::load_checkpoint(Path::new(dir)).map_err(to_py)? })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save_checkpoint(Path::new(dir)).map_err(to_py)
    }

    /// Probability assigned to the real class, one value per sample.
    fn scores(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<f64>> {
        self.inner.scores(&tensor_from(data, shape)?).map_err(to_py)
    }

    /// Hard 0/1 predictions (1 = real).
    fn predict(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<Vec<u8>> {
        self.inner.predict(&tensor_from(data, shape)?).map_err(to_py)
    }

    /// L2-normalised embeddings as `(flat_data, shape)`.
    fn encode(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        Ok(tensor_out(&self.inner.encode(&tensor_from(data, shape)?).map_err(to_py)?))
    }

    /// Raw fake/real logits as `(flat_data, shape)`.
    fn logits(&self, data: Vec<f64>, shape: Vec<usize>) -> PyResult<(Vec<f64>, Vec<usize>)> {
        Ok(tensor_out(&self.inner.logits(&tensor_from(data, shape)?).map_err(to_py)?))
    }

    fn architecture(&self) -> String {
        self.inner.arch().id.clone()
    }

    fn input_shape(&self) -> [usize; 3] {
        self.inner.arch().input_shape
    }

    fn num_params(&self) -> usize {
        self.inner.num_params()
    }

    /// Content hash of the parameter tensors; equal hashes mean bitwise
    /// equal models.
    fn content_hash(&self) -> String {
        self.inner.content_hash()
    }

    fn __repr__(&self) -> String {
        format!(
            "Model(architecture='{}', input_shape={:?}, num_params={})",
            self.inner.arch().id,
            self.inner.arch().input_shape,
            self.inner.num_params()
        )
    }
}

/// A generated or loaded clip dataset.
#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: CoreDataset,
}

#[pymethods]
impl PyDataset {
    /// Generates a dataset from a JSON `DatasetConfig`.
    #[staticmethod]
    fn generate(config_json: &str) -> PyResult<Self> {
        let cfg: DatasetConfig = serde_json::from_str(config_json)
            .map_err(|e| PyValueError::new_err(format!("dataset config: {e}")))?;
        Ok(PyDataset { inner: data::generate_dataset(&cfg).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(dir: &str) -> PyResult<Self> {
        Ok(PyDataset { inner: CoreDataset::load(Path::new(dir)).map_err(to_py)? })
    }

    fn save(&self, dir: &str) -> PyResult<()> {
        self.inner.save(Path::new(dir)).map_err(to_py)
    }

    fn manifest_hash(&self) -> PyResult<String> {
        self.inner.manifest_hash().map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    /// Model input shape `[channels, height, width]` implied by the config.
    fn input_shape(&self) -> [usize; 3] {
        self.inner.config().input_shape()
    }

    /// The dataset's config as a JSON string.
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string_pretty(self.inner.config())
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))
    }

    /// All clips stacked into one model batch: `(flat_data, shape, labels,
    /// video_ids)`.
    fn stacked(&self) -> PyResult<(Vec<f64>, Vec<usize>, Vec<u8>, Vec<usize>)> {
        let (x, labels, videos) = self.inner.stacked().map_err(to_py)?;
        let (data, shape) = tensor_out(&x);
        Ok((data, shape, labels, videos))
    }

    fn __repr__(&self) -> String {
        let cfg = self.inner.config();
        format!(
            "Dataset(clips={}, videos={}, shape=[{}, {}, {}, {}])",
            self.inner.len(),
            cfg.num_videos,
            cfg.frames,
            cfg.height,
            cfg.width,
            cfg.channels
        )
    }
}

/// Rank-based ROC AUC of real-class scores against 0/1 labels.
#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::roc_auc(&scores, &labels).map_err(to_py)
}

/// Fraction of samples whose thresholded score matches the label.
#[pyfunction]
fn accuracy(scores: Vec<f64>, labels: Vec<u8>) -> PyResult<f64> {
    eval::accuracy(&scores, &labels).map_err(to_py)
}

/// Mean clip score per video id; returns `(video_ids, means)` sorted by id.
#[pyfunction]
fn video_level_scores(video_ids: Vec<usize>, scores: Vec<f64>) -> PyResult<(Vec<usize>, Vec<f64>)> {
    if video_ids.len() != scores.len() {
        return Err(PyValueError::new_err(format!(
            "{} video ids vs {} scores",
            video_ids.len(),
            scores.len()
        )));
    }
    let pairs: Vec<(usize, f64)> = video_ids.into_iter().zip(scores).collect();
    Ok(eval::video_level_scores(&pairs).map_err(to_py)?.into_iter().unzip())
}

/// One-step sign attack at L-inf budget `epsilon`.
#[pyfunction]
fn fgsm(
    model: &PyModel,
    data: Vec<f64>,
    shape: Vec<usize>,
    labels: Vec<u8>,
    epsilon: f64,
) -> PyResult<Vec<f64>> {
    let x = tensor_from(data, shape)?;
    Ok(attack::fgsm(&model.inner, &x, &labels, epsilon).map_err(to_py)?.data().to_vec())
}

/// Iterative projected L-inf attack; returns the perturbed batch.
#[pyfunction]
#[pyo3(signature = (model, data, shape, labels, steps=10, epsilon=8.0/255.0, seed=0))]
fn pgd(
    model: &PyModel,
    data: Vec<f64>,
    shape: Vec<usize>,
    labels: Vec<u8>,
    steps: usize,
    epsilon: f64,
    seed: u64,
) -> PyResult<Vec<f64>> {
    let x = tensor_from(data, shape)?;
    let cfg = AttackConfig::pgd(steps, epsilon);
    Ok(attack::pgd(&model.inner, &x, &labels, &cfg, seed).map_err(to_py)?.data().to_vec())
}

/// Largest absolute per-element deviation between two equally shaped
/// batches.
#[pyfunction]
fn linf_deviation(
    a: Vec<f64>,
    b: Vec<f64>,
    shape: Vec<usize>,
) -> PyResult<f64> {
    let at = tensor_from(a, shape.clone())?;
    let bt = tensor_from(b, shape)?;
    attack::linf_deviation(&at, &bt).map_err(to_py)
}

/// Trains a model on the dataset. `config_json` is a JSON `TrainConfig`;
/// returns the trained model and the training history as a JSON string.
#[pyfunction]
fn train_model(dataset: &PyDataset, config_json: &str) -> PyResult<(PyModel, String)> {
    let cfg: TrainConfig = serde_json::from_str(config_json)
        .map_err(|e| PyValueError::new_err(format!("train config: {e}")))?;
    let (params, history) = train::train(&dataset.inner, &cfg).map_err(to_py)?;
    let history_json =
        serde_json::to_string(&history).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    Ok((PyModel { inner: params }, history_json))
}

/// Evaluates a model under named conditions ("clean", "fgsm", "pgd10",
/// "cw2", "transfer"); returns the report as a JSON string. The transfer
/// condition requires `surrogate`.
#[pyfunction]
#[pyo3(signature = (model, dataset, conditions, seed=0, jobs=1, surrogate=None))]
fn robust_eval(
    model: &PyModel,
    dataset: &PyDataset,
    conditions: Vec<String>,
    seed: u64,
    jobs: usize,
    surrogate: Option<&PyModel>,
) -> PyResult<String> {
    let parsed: Vec<EvalCondition> = conditions
        .iter()
        .map(|c| EvalCondition::parse(c))
        .collect::<Result<_, _>>()
        .map_err(to_py)?;
    let report = eval::robust_eval(
        &model.inner,
        &dataset.inner,
        &parsed,
        surrogate.map(|s| &s.inner),
        seed,
        jobs,
    )
    .map_err(to_py)?;
    report.to_json().map_err(to_py)
}

/// Runs the full 7-kind x 5-severity distortion sweep; returns JSON with
/// per-cell video AUC and the per-severity average row.
#[pyfunction]
#[pyo3(signature = (model, dataset, seed=0, jobs=1))]
fn distortion_sweep(
    model: &PyModel,
    dataset: &PyDataset,
    seed: u64,
    jobs: usize,
) -> PyResult<String> {
    let sweep =
        eval::distortion_sweep(&model.inner, &dataset.inner, seed, jobs).map_err(to_py)?;
    serde_json::to_string_pretty(&sweep).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Central-difference gradient checks over the autodiff primitives and the
/// training losses. Returns `(name, max_rel_error, tolerance, pass)` rows.
#[pyfunction]
#[pyo3(signature = (seed=7))]
fn gradient_battery(seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    let mut entries = tensor::gradient_battery(seed).map_err(to_py)?;
    entries.extend(afsl_core::loss::loss_gradient_battery(seed).map_err(to_py)?);
    Ok(entries.into_iter().map(|e| (e.name, e.max_rel_error, e.tolerance, e.pass)).collect())
}

#[pymodule]
fn afsl(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(video_level_scores, m)?)?;
    m.add_function(wrap_pyfunction!(fgsm, m)?)?;
    m.add_function(wrap_pyfunction!(pgd, m)?)?;
    m.add_function(wrap_pyfunction!(linf_deviation, m)?)?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(robust_eval, m)?)?;
    m.add_function(wrap_pyfunction!(distortion_sweep, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_battery, m)?)?;
    m.add("DEFAULT_LINF_EPSILON", attack::DEFAULT_LINF_EPSILON)?;
    Ok(())
}
