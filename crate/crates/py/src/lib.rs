//! Python bindings. Matrices cross the boundary as lists of rows.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use sere_core::checkpoint::Checkpoint;
use sere_core::dsp::{self, FeatureConfig};
use sere_core::idfe::{self, EmbeddingSequence, EnhancedRepresentation};
use sere_core::manifest::Manifest;
use sere_core::toy::{ToyConfig, ToyCorpus};
use sere_core::trainer::{self, TrainConfig};
use sere_core::{irf, tensor_file, tric, Utterance};

create_exception!(sere, SereError, PyException);

fn err(e: sere_core::SereError) -> PyErr {
    SereError::new_err(e.to_string())
}

fn to_array(rows: Vec<Vec<f64>>) -> PyResult<Array2<f64>> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(SereError::new_err("ragged matrix"));
    }
    let n = rows.len();
    Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
        .map_err(|e| SereError::new_err(e.to_string()))
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.rows().into_iter().map(|r| r.to_vec()).collect()
}

#[pyclass(name = "IrfParams", from_py_object)]
#[derive(Clone)]
struct PyIrfParams(irf::IrfParams);

#[pymethods]
impl PyIrfParams {
    #[new]
    #[pyo3(signature = (alpha=1.0, beta=1.0, gamma=1.0, delta=1.0))]
    fn new(alpha: f64, beta: f64, gamma: f64, delta: f64) -> PyResult<Self> {
        let p = irf::IrfParams { alpha, beta, gamma, delta };
        p.validate().map_err(err)?;
        Ok(Self(p))
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta
    }
    #[getter]
    fn gamma(&self) -> f64 {
        self.0.gamma
    }
    #[getter]
    fn delta(&self) -> f64 {
        self.0.delta
    }

    fn __repr__(&self) -> String {
        let p = self.0;
        format!("IrfParams(alpha={}, beta={}, gamma={}, delta={})", p.alpha, p.beta, p.gamma, p.delta)
    }
}

/// Resonance result: scalar score, full matrix and best column per row.
#[pyclass(name = "Resonance", get_all)]
struct PyResonance {
    irf: f64,
    matrix: Vec<Vec<f64>>,
    alignment: Vec<usize>,
}

/// Enhanced frames `[H, r]` from embeddings and per-frame static features, with a zero gate.
#[pyfunction]
#[pyo3(signature = (embeddings, features, epsilon=idfe::DEFAULT_EPSILON))]
fn enhance(embeddings: Vec<Vec<f64>>, features: Vec<Vec<f64>>, epsilon: f64) -> PyResult<Vec<Vec<f64>>> {
    let h = EmbeddingSequence::new("py", to_array(embeddings)?).map_err(err)?;
    let feats = dsp::StaticFeatures::new(to_array(features)?).map_err(err)?;
    let gate = idfe::IdfeParams::zeros(h.dim());
    let (_, u) = idfe::run_idfe(&feats, &h, &gate, epsilon).map_err(err)?;
    Ok(to_rows(&u.u))
}

/// Resonates two enhanced sequences (embedding columns plus 4 dynamic columns).
#[pyfunction]
#[pyo3(signature = (a, b, params=None))]
fn resonate(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, params: Option<PyIrfParams>) -> PyResult<PyResonance> {
    let params = params.map_or(irf::IrfParams::default(), |p| p.0);
    let mut a = EnhancedRepresentation { u: to_array(a)?, burst: None };
    let mut b = EnhancedRepresentation { u: to_array(b)?, burst: None };
    let res = irf::resonate(&mut a, &mut b, &params).map_err(err)?;
    Ok(PyResonance { irf: res.irf, matrix: to_rows(&res.matrix), alignment: res.alignment })
}

/// Static features (F0, energy, MFCC c2, centroid) of a WAV file, one row per frame.
#[pyfunction]
fn extract_features(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    let bytes = std::fs::read(&path).map_err(|e| SereError::new_err(format!("{}: {e}", path.display())))?;
    let audio = dsp::decode_wav(&bytes).map_err(err)?;
    let feats = dsp::extract_static(&audio, &FeatureConfig::default()).map_err(err)?;
    Ok(to_rows(feats.values()))
}

#[pyfunction]
fn read_tensor(path: PathBuf) -> PyResult<Vec<Vec<f64>>> {
    Ok(to_rows(&tensor_file::read(&path).map_err(err)?))
}

#[pyfunction]
fn write_tensor(path: PathBuf, rows: Vec<Vec<f64>>) -> PyResult<()> {
    tensor_file::write(&path, &to_array(rows)?).map_err(err)
}

/// Writes the synthetic corpus and returns its manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, seed=None))]
fn write_toy(out_dir: PathBuf, seed: Option<u64>) -> PyResult<PathBuf> {
    let mut cfg = ToyConfig::default();
    if let Some(s) = seed {
        cfg.seed = s;
    }
    ToyCorpus::generate(&cfg).write(&out_dir).map_err(err)
}

#[pyclass(name = "Model")]
struct PyModel(Checkpoint);

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::load(&path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        std::fs::create_dir_all(&path).map_err(|e| SereError::new_err(e.to_string()))?;
        self.0.save(&path).map_err(err)
    }

    #[getter]
    fn classes(&self) -> Vec<String> {
        self.0.classes.clone()
    }

    #[getter]
    fn irf_params(&self) -> PyIrfParams {
        PyIrfParams(self.0.model.irf)
    }

    #[getter]
    fn parameters(&self) -> Vec<f64> {
        self.0.model.parameters()
    }

    /// Class name for an utterance given as embeddings and static features.
    fn classify(&self, embeddings: Vec<Vec<f64>>, features: Vec<Vec<f64>>) -> PyResult<String> {
        let h = to_array(embeddings)?;
        let feats = dsp::StaticFeatures::new(to_array(features)?).map_err(err)?;
        let dynamics = idfe::normalized_dynamics(&feats, h.nrows(), self.0.epsilon).map_err(err)?;
        let utt = Utterance::new("py", h, dynamics).map_err(err)?;
        let c = tric::classify(&utt, &self.0.model, &self.0.references()).map_err(err)?;
        Ok(self.0.classes[c].clone())
    }

    /// UAR per fold on the eval_target rows of a manifest.
    #[pyo3(signature = (manifest, folds=1, seed=0))]
    fn evaluate(&self, manifest: PathBuf, folds: usize, seed: u64) -> PyResult<Vec<f64>> {
        let m = Manifest::load(&manifest).map_err(err)?;
        let data = m.load_dataset_with_classes(&self.0.classes, self.0.epsilon).map_err(err)?;
        let reports = trainer::evaluate_folds(&self.0.model, &data.eval_target, &self.0.references(), folds, seed)
            .map_err(err)?;
        Ok(reports.iter().map(|r| r.uar).collect())
    }
}

#[pyclass(name = "TrainResult", get_all)]
struct PyTrainResult {
    model: Py<PyModel>,
    /// `(proto, dual, total)` at the start of each epoch.
    losses: Vec<(f64, f64, f64)>,
    final_loss: f64,
    steps: usize,
}

fn load_config(config: Option<&str>) -> PyResult<TrainConfig> {
    match config {
        Some(json) => TrainConfig::from_json(json).map_err(err),
        None => Ok(TrainConfig::default()),
    }
}

/// Trains on a manifest. `config` is a JSON object of training options.
#[pyfunction]
#[pyo3(signature = (manifest, config=None))]
fn train(py: Python<'_>, manifest: PathBuf, config: Option<&str>) -> PyResult<PyTrainResult> {
    let cfg = load_config(config)?;
    let m = Manifest::load(&manifest).map_err(err)?;
    let data = m.load_dataset(cfg.epsilon).map_err(err)?;
    let outcome = py.detach(|| trainer::train(&cfg, &data)).map_err(err)?;
    let losses = outcome.epochs.iter().map(|r| (r.loss.proto, r.loss.dual, r.loss.total)).collect();
    let ck = Checkpoint {
        model: outcome.model,
        classes: data.classes,
        references: outcome.references,
        epsilon: cfg.epsilon,
    };
    Ok(PyTrainResult {
        model: Py::new(py, PyModel(ck))?,
        losses,
        final_loss: outcome.final_loss.total,
        steps: outcome.steps,
    })
}

/// Trains once per stratified fold of the eval set; returns the fold UARs.
#[pyfunction]
#[pyo3(signature = (manifest, folds=5, config=None))]
fn cross_validate(py: Python<'_>, manifest: PathBuf, folds: usize, config: Option<&str>) -> PyResult<Vec<f64>> {
    let cfg = load_config(config)?;
    let data = Manifest::load(Path::new(&manifest)).and_then(|m| m.load_dataset(cfg.epsilon)).map_err(err)?;
    let reports = py.detach(|| trainer::cross_validate(&cfg, &data, folds)).map_err(err)?;
    Ok(reports.iter().map(|r| r.uar).collect())
}

#[pymodule]
fn sere(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SereError", m.py().get_type::<SereError>())?;
    m.add_class::<PyIrfParams>()?;
    m.add_class::<PyResonance>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_function(wrap_pyfunction!(enhance, m)?)?;
    m.add_function(wrap_pyfunction!(resonate, m)?)?;
    m.add_function(wrap_pyfunction!(extract_features, m)?)?;
    m.add_function(wrap_pyfunction!(read_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_tensor, m)?)?;
    m.add_function(wrap_pyfunction!(write_toy, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(cross_validate, m)?)?;
    Ok(())
}
