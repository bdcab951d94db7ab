//! Python bindings for `rawspoof`.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rawspoof_core::checkpoint::{load_checkpoint, save_checkpoint, TrainingMeta};
use rawspoof_core::config::ConfigSection;
use rawspoof_core::data::{make_eval_sequence, prepare_frames};
use rawspoof_core::features::{extract_features, FeatureConfig};
use rawspoof_core::gmm::{em_fit, llr_score, DiagonalGmm};
use rawspoof_core::metrics::{self, ScoreRecord, Truth};
use rawspoof_core::model::{build_seeded, CldnnModel, ModelConfig};
use rawspoof_core::synth::{generate_synthetic_corpus, SynthSpec};
use rawspoof_core::train::adadelta_update;
use rawspoof_core::{wav, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        Error::NonFinite(_) | Error::Shape { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn records(scores: &[f64], genuine: &[bool]) -> PyResult<Vec<ScoreRecord>> {
    if scores.len() != genuine.len() {
        return Err(PyValueError::new_err("scores and labels differ in length"));
    }
    Ok(scores
        .iter()
        .zip(genuine)
        .enumerate()
        .map(|(i, (&s, &g))| {
            let truth = if g { Truth::Genuine } else { Truth::Attack };
            ScoreRecord::new(i.to_string(), s, truth, "")
        })
        .collect())
}

/// Raw-waveform CLDNN in evaluation mode.
#[pyclass(name = "Cldnn", module = "pyrawspoof")]
struct PyCldnn {
    inner: CldnnModel,
}

#[pymethods]
impl PyCldnn {
    /// `preset` is `cldnn1` or `cldnn2`; `overrides` maps config keys to values.
    #[new]
    #[pyo3(signature = (preset = "cldnn1", seed = 0, overrides = None))]
    fn new(preset: &str, seed: u64, overrides: Option<Vec<(String, String)>>) -> PyResult<Self> {
        let mut config = ModelConfig::preset(preset).map_err(py_err)?;
        for (k, v) in overrides.unwrap_or_default() {
            if !config.set(&k, &v).map_err(py_err)? {
                return Err(PyValueError::new_err(format!("unknown model key '{k}'")));
            }
        }
        Ok(Self {
            inner: build_seeded(&config, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = load_checkpoint(&path).map_err(py_err)?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &TrainingMeta::default(), &path).map_err(py_err)
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    #[getter]
    fn config(&self) -> Vec<(String, String)> {
        self.inner
            .config
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect()
    }

    fn summary(&self) -> String {
        self.inner.summary()
    }

    fn logits(&self, samples: Vec<f64>) -> PyResult<Vec<f64>> {
        let c = &self.inner.config;
        let frames = prepare_frames(&samples, c.frame_len, c.hop()).map_err(py_err)?;
        let seq = make_eval_sequence(&frames, "<python>").map_err(py_err)?;
        self.inner.logits(&seq).map_err(py_err)
    }

    /// Genuine-class log-probability of a whole utterance.
    fn score(&self, samples: Vec<f64>) -> PyResult<f64> {
        let c = &self.inner.config;
        let frames = prepare_frames(&samples, c.frame_len, c.hop()).map_err(py_err)?;
        let seq = make_eval_sequence(&frames, "<python>").map_err(py_err)?;
        self.inner.score(&seq).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Cldnn({})", self.inner.summary())
    }
}

/// Diagonal-covariance Gaussian mixture.
#[pyclass(name = "Gmm", module = "pyrawspoof")]
struct PyGmm {
    inner: DiagonalGmm,
}

#[pymethods]
impl PyGmm {
    #[new]
    fn new(weights: Vec<f64>, means: Vec<Vec<f64>>, variances: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self {
            inner: DiagonalGmm::new(weights, means, variances).map_err(py_err)?,
        })
    }

    /// Fits by EM; returns the model and the log-likelihood trace.
    #[staticmethod]
    #[pyo3(signature = (frames, k, iters = 20, var_floor = 1e-3, seed = 0))]
    fn fit(frames: Vec<Vec<f64>>, k: usize, iters: usize, var_floor: f64, seed: u64) -> PyResult<(Self, Vec<f64>)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let fit = em_fit(&frames, k, iters, var_floor, &mut rng).map_err(py_err)?;
        Ok((Self { inner: fit.gmm }, fit.trace))
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.inner.weights.clone()
    }

    #[getter]
    fn means(&self) -> Vec<Vec<f64>> {
        self.inner.means.clone()
    }

    #[getter]
    fn variances(&self) -> Vec<Vec<f64>> {
        self.inner.variances.clone()
    }

    fn avg_loglik(&self, frames: Vec<Vec<f64>>) -> PyResult<f64> {
        self.inner.avg_loglik(&frames).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (frames, genuine, spoof, average = true))]
fn gmm_llr(frames: Vec<Vec<f64>>, genuine: &PyGmm, spoof: &PyGmm, average: bool) -> PyResult<f64> {
    llr_score(&frames, &genuine.inner, &spoof.inner, average).map_err(py_err)
}

/// 39-dimensional MFCC + delta + delta-delta features, one row per frame.
#[pyfunction]
fn mfcc(samples: Vec<f64>) -> PyResult<Vec<Vec<f64>>> {
    extract_features(&samples, &FeatureConfig::default()).map_err(py_err)
}

/// Normalized, non-overlapping frames of `frame_len` samples.
#[pyfunction]
#[pyo3(signature = (samples, frame_len = 560))]
fn frames(samples: Vec<f64>, frame_len: usize) -> PyResult<Vec<Vec<f64>>> {
    prepare_frames(&samples, frame_len, frame_len).map_err(py_err)
}

#[pyfunction]
fn read_wav(path: PathBuf) -> PyResult<(Vec<f64>, u32)> {
    let a = wav::read_wav(&path).map_err(py_err)?;
    Ok((a.samples, a.sample_rate))
}

#[pyfunction]
fn far(attack_scores: Vec<f64>, theta: f64) -> PyResult<f64> {
    metrics::far(&attack_scores, theta).map_err(py_err)
}

#[pyfunction]
fn frr(genuine_scores: Vec<f64>, theta: f64) -> PyResult<f64> {
    metrics::frr(&genuine_scores, theta).map_err(py_err)
}

/// Returns `(theta, far, frr, (far+frr)/2)` as fractions.
#[pyfunction]
fn select_threshold(scores: Vec<f64>, genuine: Vec<bool>) -> PyResult<(f64, f64, f64, f64)> {
    let c = metrics::select_threshold(&records(&scores, &genuine)?).map_err(py_err)?;
    Ok((c.theta, c.far, c.frr, c.metric))
}

/// Threshold on dev, HTER on eval; returns the report as JSON text.
#[pyfunction]
fn evaluate(dev_scores: Vec<f64>, dev_genuine: Vec<bool>, eval_scores: Vec<f64>, eval_genuine: Vec<bool>) -> PyResult<String> {
    let dev = records(&dev_scores, &dev_genuine)?;
    let eval = records(&eval_scores, &eval_genuine)?;
    Ok(metrics::evaluate(&dev, &eval, &[]).map_err(py_err)?.to_json())
}

/// One Adadelta coordinate update; returns `(delta, eg2, edx2)`.
#[pyfunction]
#[pyo3(signature = (grad, eg2, edx2, rho = 0.95, eps = 1e-6))]
fn adadelta(grad: f64, mut eg2: f64, mut edx2: f64, rho: f64, eps: f64) -> (f64, f64, f64) {
    let d = adadelta_update(grad, &mut eg2, &mut edx2, rho, eps);
    (d, eg2, edx2)
}

/// Writes the synthetic corpus under `out` and returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out, seed = 0, per_class = 10, duration_seconds = 2.0))]
fn synth(out: PathBuf, seed: u64, per_class: usize, duration_seconds: f64) -> PyResult<PathBuf> {
    let spec = SynthSpec {
        per_class,
        duration_seconds,
        ..SynthSpec::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    generate_synthetic_corpus(&spec, &mut rng, &out).map_err(py_err)?;
    Ok(out.join("manifest.tsv"))
}

#[pymodule]
pub fn pyrawspoof(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCldnn>()?;
    m.add_class::<PyGmm>()?;
    m.add_function(wrap_pyfunction!(gmm_llr, m)?)?;
    m.add_function(wrap_pyfunction!(mfcc, m)?)?;
    m.add_function(wrap_pyfunction!(frames, m)?)?;
    m.add_function(wrap_pyfunction!(read_wav, m)?)?;
    m.add_function(wrap_pyfunction!(far, m)?)?;
    m.add_function(wrap_pyfunction!(frr, m)?)?;
    m.add_function(wrap_pyfunction!(select_threshold, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(adadelta, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    Ok(())
}
