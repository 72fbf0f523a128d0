//! Python bindings: configuration, the synthetic corpus, the training pipeline, sampling,
//! and the evaluation metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyFileNotFoundError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use ladiff::config::ExperimentConfig;
use ladiff::corpus::MotionSequence;
use ladiff::eval::{self, FeatureExtractors, MetricReport, METRICS};
use ladiff::experiment::{self as exp, Dataset, Models};
use ladiff::Error;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Vocabulary { .. } | Error::Domain(_) | Error::Length { .. } | Error::Shape(_) => {
            PyValueError::new_err(e.to_string())
        }
        Error::MissingArtifact { .. } => PyFileNotFoundError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn pose_rows(m: &MotionSequence) -> Vec<Vec<f64>> {
    (0..m.frames()).map(|i| m.frame(i).to_vec()).collect()
}

/// Number of latent slots a motion of `frames` frames activates at `frames_per_latent`.
#[pyfunction]
fn activation_count(frames: usize, frames_per_latent: usize) -> PyResult<usize> {
    ladiff::lavae::activation_count(frames, frames_per_latent).map_err(py_err)
}

/// Frechet distance between Gaussian fits of two feature sets.
#[pyfunction]
fn fid(real: Vec<Vec<f64>>, generated: Vec<Vec<f64>>) -> PyResult<f64> {
    eval::fid(&real, &generated).map_err(py_err)
}

/// Top-1/2/3 retrieval accuracy of matched rows among batches of distractors.
#[pyfunction]
#[pyo3(signature = (motion, text, batch_size = 32, seed = 0))]
fn r_precision(motion: Vec<Vec<f64>>, text: Vec<Vec<f64>>, batch_size: usize, seed: u64) -> PyResult<[f64; 3]> {
    eval::r_precision(&motion, &text, batch_size, &mut ladiff::rng::seeded(seed)).map_err(py_err)
}

#[pyclass(name = "ExperimentConfig", from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyConfig {
    /// Built-in defaults.
    #[new]
    fn new() -> Self {
        Self { inner: ExperimentConfig::default() }
    }

    #[staticmethod]
    fn desk() -> Self {
        Self { inner: ExperimentConfig::desk() }
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        ExperimentConfig::from_toml(text).map(|inner| Self { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        ExperimentConfig::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn to_toml(&self) -> String {
        self.inner.to_toml()
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn out_dir(&self) -> PathBuf {
        self.inner.out_dir.clone()
    }

    #[setter]
    fn set_out_dir(&mut self, dir: PathBuf) {
        self.inner.out_dir = dir;
    }

    /// `K`, the slot count of the longest admissible motion.
    #[getter]
    fn max_slots(&self) -> usize {
        self.inner.max_slots()
    }

    fn active_slots(&self, frames: usize) -> PyResult<usize> {
        self.inner.lavae.active_slots(frames).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("ExperimentConfig(seed={}, out_dir={:?}, K={})", self.inner.seed, self.inner.out_dir, self.inner.max_slots())
    }
}

fn report_dict(report: &MetricReport) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = METRICS.iter().map(|m| m.to_string()).zip(report.values()).collect();
    if let Some(ci) = report.ci95 {
        out.extend(METRICS.iter().map(|m| format!("{m}_ci95")).zip(ci));
    }
    out
}

/// Corpus, models, and extractors of one experiment, trained or loaded stage by stage.
#[pyclass]
struct Pipeline {
    config: ExperimentConfig,
    data: Dataset,
    models: Option<Models>,
    extractors: Option<FeatureExtractors<f32>>,
}

impl Pipeline {
    fn models(&self) -> PyResult<&Models> {
        self.models
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("no trained models; call fit_vae and fit_denoiser, or load"))
    }
}

#[pymethods]
impl Pipeline {
    /// Generates the corpus in memory for `config`.
    #[new]
    fn new(config: PyConfig) -> PyResult<Self> {
        let data = Dataset::generate(&config.inner).map_err(py_err)?;
        Ok(Self { config: config.inner, data, models: None, extractors: None })
    }

    /// Sample counts of the train, validation, and test splits.
    fn split_sizes(&self) -> (usize, usize, usize) {
        (self.data.train.len(), self.data.val.len(), self.data.test.len())
    }

    /// Trains the autoencoder and then the denoiser; returns their final epoch lines.
    fn fit(&mut self) -> PyResult<(String, String)> {
        let c = &self.config;
        let (vae, vae_log) = exp::fit_vae(c, &self.data).map_err(py_err)?;
        let (denoiser, den_log) = exp::fit_denoiser(c, &vae, &self.data).map_err(py_err)?;
        let schedule = c.diffusion.schedule().map_err(py_err)?;
        self.models = Some(Models { vae, denoiser, schedule });
        let last = |l: &ladiff::training::TrainingLog| l.last().map(|e| e.to_line()).unwrap_or_default();
        Ok((last(&vae_log), last(&den_log)))
    }

    /// Trains the evaluation extractors and returns the validation margin.
    fn fit_extractors(&mut self) -> PyResult<f64> {
        let (ex, _) = exp::fit_extractors(&self.config, &self.data).map_err(py_err)?;
        let margin = ex.margin();
        self.extractors = Some(ex);
        Ok(margin)
    }

    /// Writes every trained component as a checkpoint under the output directory.
    fn save(&self) -> PyResult<Vec<PathBuf>> {
        let mut paths = Vec::new();
        if let Some(m) = &self.models {
            paths.push(exp::save_vae(&self.config, &m.vae).map_err(py_err)?);
            paths.push(exp::save_denoiser(&self.config, &m.denoiser).map_err(py_err)?);
        }
        if let Some(ex) = &self.extractors {
            paths.push(exp::save_extractors(&self.config, ex).map_err(py_err)?);
        }
        Ok(paths)
    }

    /// Restores the models, and the extractors when a checkpoint exists.
    fn load(&mut self) -> PyResult<()> {
        self.models = Some(exp::load_models(&self.config).map_err(py_err)?);
        self.extractors = match exp::load_extractors(&self.config) {
            Ok(ex) => Some(ex),
            Err(Error::MissingArtifact { .. }) => None,
            Err(e) => return Err(py_err(e)),
        };
        Ok(())
    }

    /// Generates a motion in metric units as a list of pose vectors.
    #[pyo3(signature = (text, frames, seed = 0))]
    fn sample(&self, py: Python<'_>, text: &str, frames: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let models = self.models()?;
        let embedding = self.data.embed(text).map_err(py_err)?;
        let motion = py
            .detach(|| {
                let m = models.sample(&self.config, &embedding, frames, seed)?;
                self.data.normalizer.denormalize(&m)
            })
            .map_err(py_err)?;
        Ok(pose_rows(&motion))
    }

    /// Mean joint speed, mean and peak acceleration of a generated motion.
    #[pyo3(signature = (text, frames, seed = 0))]
    fn dynamics(&self, text: &str, frames: usize, seed: u64) -> PyResult<(f64, f64, f64)> {
        let models = self.models()?;
        let embedding = self.data.embed(text).map_err(py_err)?;
        let m = models.sample(&self.config, &embedding, frames, seed).map_err(py_err)?;
        let s = eval::dynamics_stats(&self.data.normalizer.denormalize(&m).map_err(py_err)?).map_err(py_err)?;
        Ok((s.avg_vel, s.avg_acc, s.max_acc))
    }

    /// Metric report on the test split as `(name, value)` pairs.
    fn evaluate(&self, py: Python<'_>) -> PyResult<Vec<(String, f64)>> {
        let models = self.models()?;
        let ex = self
            .extractors
            .as_ref()
            .ok_or_else(|| PyRuntimeError::new_err("no extractors; call fit_extractors or load"))?;
        let report = py.detach(|| exp::evaluate_models(&self.config, models, ex, &self.data)).map_err(py_err)?;
        Ok(report_dict(&report))
    }
}

#[pymodule]
fn ladiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(activation_count, m)?)?;
    m.add_function(wrap_pyfunction!(fid, m)?)?;
    m.add_function(wrap_pyfunction!(r_precision, m)?)?;
    m.add_class::<PyConfig>()?;
    m.add_class::<Pipeline>()?;
    m.add("POSE_DIM", ladiff::corpus::SKELETON.dim())?;
    Ok(())
}
