//! Python bindings for the physsm crate.

use std::path::PathBuf;

use nalgebra::{DMatrix, DVector};
use physsm::dynamics::{build_dataset, Dataset, IrregularTrajectory, System};
use physsm::objective::RegMetric;
use physsm::train::{self, ExperimentConfig, UniquenessConfig};
use physsm::vae::PhySsmModel;
use physsm::Error;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::Shape(_) | Error::Domain(_) | Error::SupportOverlap { .. } => {
            PyValueError::new_err(e.to_string())
        }
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let n = rows.len();
    let m = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != m) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| rows[i][j]))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn columns(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().copied().collect()).collect()
}

/// Bilinear discretization of `(A, B)` with step `delta`.
#[pyfunction]
fn discretize_bilinear(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, delta: f64) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let a = matrix(a)?;
    let b = if b.is_empty() { DMatrix::zeros(a.nrows(), 0) } else { matrix(b)? };
    let (ab, bb) = physsm::ssm::discretize_bilinear(&a, &b, delta).map_err(to_py)?;
    Ok((rows(&ab), rows(&bb)))
}

#[pyfunction]
fn apply_knowledge_mask(raw: Vec<Vec<f64>>, mask: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let out = physsm::unit::apply_knowledge_mask(&matrix(raw)?, &matrix(mask)?).map_err(to_py)?;
    Ok(rows(&out))
}

/// KL divergence between per-step diagonal Gaussians.
#[pyfunction]
fn kl_gaussian_diag(q_mean: Vec<Vec<f64>>, q_std: Vec<Vec<f64>>, p_mean: Vec<Vec<f64>>, p_std: Vec<Vec<f64>>) -> PyResult<f64> {
    let v = |x: Vec<Vec<f64>>| x.into_iter().map(DVector::from_vec).collect::<Vec<_>>();
    physsm::objective::kl_gaussian_diag(&v(q_mean), &v(q_std), &v(p_mean), &v(p_std)).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (seed = 0, iterations = None))]
fn uniqueness_recovery_test(py: Python<'_>, seed: u64, iterations: Option<usize>) -> PyResult<Py<PyDict>> {
    let mut cfg = UniquenessConfig::default();
    if let Some(n) = iterations {
        cfg.iterations = n;
    }
    let r = train::uniqueness_recovery_test(seed, &cfg).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("entries", r.entries)?;
    d.set_item("max_abs_error", r.max_abs_error)?;
    d.set_item("known_bit_identical", r.known_bit_identical)?;
    d.set_item("final_loss", r.final_loss)?;
    Ok(d.unbind())
}

/// Runs the command-line interface in-process and returns its exit code.
#[pyfunction]
fn run_cli(args: Vec<String>) -> i32 {
    let mut full = vec!["physsm".to_string()];
    full.extend(args);
    physsm::cli::run(full)
}

#[pyclass(name = "ExperimentConfig", skip_from_py_object)]
#[derive(Clone)]
struct PyExperimentConfig {
    inner: ExperimentConfig,
}

#[pymethods]
impl PyExperimentConfig {
    #[staticmethod]
    fn for_system(system: &str) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::for_system(System::parse(system).map_err(to_py)?) })
    }

    #[staticmethod]
    fn from_toml(text: &str) -> PyResult<Self> {
        Ok(Self { inner: ExperimentConfig::from_toml(text).map_err(to_py)? })
    }

    fn to_toml(&self) -> PyResult<String> {
        self.inner.to_toml().map_err(to_py)
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(to_py)
    }

    /// Scales the data splits down, e.g. for quick smoke runs.
    fn set_sizes(&mut self, n_train: usize, n_val: usize, n_test: usize) {
        self.inner.data.n_train = n_train;
        self.inner.data.n_val = n_val;
        self.inner.data.n_test = n_test;
    }

    #[getter]
    fn epochs(&self) -> usize {
        self.inner.train.epochs
    }
    #[setter]
    fn set_epochs(&mut self, v: usize) {
        self.inner.train.epochs = v;
    }
    #[getter]
    fn learning_rate(&self) -> f64 {
        self.inner.train.learning_rate
    }
    #[setter]
    fn set_learning_rate(&mut self, v: f64) {
        self.inner.train.learning_rate = v;
    }
    #[getter]
    fn batch_size(&self) -> usize {
        self.inner.train.batch_size
    }
    #[setter]
    fn set_batch_size(&mut self, v: usize) {
        self.inner.train.batch_size = v;
    }
    #[getter]
    fn beta(&self) -> f64 {
        self.inner.train.beta
    }
    #[setter]
    fn set_beta(&mut self, v: f64) {
        self.inner.train.beta = v;
    }
    #[getter]
    fn lambda_(&self) -> f64 {
        self.inner.train.lambda
    }
    #[setter]
    fn set_lambda_(&mut self, v: f64) {
        self.inner.train.lambda = v;
    }
    #[getter]
    fn n_in(&self) -> usize {
        self.inner.train.n_in
    }
    #[setter]
    fn set_n_in(&mut self, v: usize) {
        self.inner.train.n_in = v;
    }
    #[getter]
    fn n_out(&self) -> usize {
        self.inner.train.n_out
    }
    #[setter]
    fn set_n_out(&mut self, v: usize) {
        self.inner.train.n_out = v;
    }
    #[getter]
    fn reg_metric(&self) -> &'static str {
        self.inner.train.reg_metric.name()
    }
    #[setter]
    fn set_reg_metric(&mut self, v: &str) -> PyResult<()> {
        self.inner.train.reg_metric = RegMetric::parse(v).map_err(to_py)?;
        Ok(())
    }
    #[getter]
    fn seeds(&self) -> Vec<u64> {
        self.inner.train.seeds.clone()
    }
    #[setter]
    fn set_seeds(&mut self, v: Vec<u64>) {
        self.inner.train.seeds = v;
    }
    #[getter]
    fn horizon(&self) -> usize {
        self.inner.data.horizon
    }
    #[setter]
    fn set_horizon(&mut self, v: usize) {
        self.inner.data.horizon = v;
    }
}

#[pyclass(name = "Dataset")]
struct PyDataset {
    inner: Dataset,
}

impl PyDataset {
    fn split(&self, name: &str) -> PyResult<&[IrregularTrajectory]> {
        match name {
            "train" => Ok(&self.inner.train.corrupted),
            "val" => Ok(&self.inner.val.corrupted),
            "test" => Ok(&self.inner.test.corrupted),
            _ => Err(PyValueError::new_err(format!("unknown split '{name}'"))),
        }
    }
}

#[pymethods]
impl PyDataset {
    /// Simulates the dataset a config describes.
    #[staticmethod]
    fn generate(config: &PyExperimentConfig) -> PyResult<Self> {
        Ok(Self { inner: build_dataset(&config.inner.data).map_err(to_py)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: Dataset::load(&path).map_err(to_py)? })
    }

    #[pyo3(signature = (path, overwrite = false))]
    fn save(&self, path: PathBuf, overwrite: bool) -> PyResult<()> {
        self.inner.save(&path, overwrite).map_err(to_py)
    }

    #[getter]
    fn system(&self) -> &'static str {
        self.inner.manifest.config.system.name()
    }

    fn __len__(&self) -> usize {
        self.inner.train.corrupted.len() + self.inner.val.corrupted.len() + self.inner.test.corrupted.len()
    }

    fn split_len(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    /// One corrupted trajectory as a dict of column lists, one entry per time point.
    fn trajectory(&self, py: Python<'_>, split: &str, index: usize) -> PyResult<Py<PyDict>> {
        let t = self
            .split(split)?
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("trajectory {index} out of range")))?;
        let d = PyDict::new(py);
        d.set_item("times", t.times.clone())?;
        d.set_item("indices", t.retained_indices.clone())?;
        d.set_item("observations", columns(&t.observations))?;
        d.set_item("clean_observations", columns(&t.clean_observations))?;
        d.set_item("controls", columns(&t.controls))?;
        d.set_item("states", columns(&t.states))?;
        Ok(d.unbind())
    }
}

#[pyclass(name = "Model")]
struct PyModel {
    inner: PhySsmModel,
    n_in: usize,
    n_out: usize,
}

fn metrics_dict(py: Python<'_>, m: &train::RunMetrics) -> PyResult<Py<PyDict>> {
    let d = PyDict::new(py);
    d.set_item("interp_mae", m.interp_mae)?;
    d.set_item("interp_mse", m.interp_mse)?;
    d.set_item("extrap_mae", m.extrap_mae)?;
    d.set_item("extrap_mse", m.extrap_mse)?;
    Ok(d.unbind())
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, meta) = PhySsmModel::load(&path).map_err(to_py)?;
        let cfg = meta.get("experiment").and_then(|t| ExperimentConfig::from_toml(t).ok());
        let (n_in, n_out) = cfg.map_or((1, 0), |c| (c.train.n_in, c.train.n_out));
        Ok(Self { inner, n_in, n_out })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path, Default::default()).map_err(to_py)
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim()
    }

    #[getter]
    fn transition_param_count(&self) -> usize {
        self.inner.transition_param_count()
    }

    #[pyo3(signature = (dataset, split = "test"))]
    fn evaluate(&self, py: Python<'_>, dataset: &PyDataset, split: &str) -> PyResult<Py<PyDict>> {
        let m = train::evaluate(&self.inner, dataset.split(split)?, self.n_in, self.n_out).map_err(to_py)?;
        metrics_dict(py, &m)
    }

    /// Decoded reconstruction and extrapolation for one trajectory.
    #[pyo3(signature = (dataset, index, split = "test"))]
    fn predict(&self, py: Python<'_>, dataset: &PyDataset, index: usize, split: &str) -> PyResult<Py<PyDict>> {
        let t = dataset
            .split(split)?
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("trajectory {index} out of range")))?;
        let f = self.inner.forward_full(t, self.n_in, self.n_out).map_err(to_py)?;
        let v = |xs: &[DVector<f64>]| xs.iter().map(|x| x.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>();
        let d = PyDict::new(py);
        d.set_item("recon", v(&f.recon))?;
        d.set_item("extrap", v(&f.extrap))?;
        d.set_item("posterior_mean", v(&f.posterior.means))?;
        d.set_item("prior_mean", v(&f.prior.means))?;
        Ok(d.unbind())
    }
}

/// Trains one seed; returns the selected model and the per-epoch history.
#[pyfunction]
#[pyo3(signature = (config, dataset, seed = 0))]
fn train_model(py: Python<'_>, config: &PyExperimentConfig, dataset: &PyDataset, seed: u64) -> PyResult<(PyModel, Vec<Py<PyDict>>)> {
    let cfg = config.inner.clone();
    let out = py.detach(|| train::train(&cfg, &dataset.inner, seed)).map_err(to_py)?;
    let mut history = Vec::with_capacity(out.history.len());
    for r in &out.history {
        let d = PyDict::new(py);
        d.set_item("epoch", r.epoch)?;
        d.set_item("recon", r.loss.recon)?;
        d.set_item("kl", r.loss.kl)?;
        d.set_item("reg", r.loss.reg)?;
        d.set_item("total", r.loss.total)?;
        d.set_item("val_extrap_mse", r.val_extrap_mse)?;
        history.push(d.unbind());
    }
    let model = PyModel { inner: out.model, n_in: cfg.train.n_in, n_out: cfg.train.n_out };
    Ok((model, history))
}

#[pymodule]
fn physsm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyExperimentConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(train_model, m)?)?;
    m.add_function(wrap_pyfunction!(discretize_bilinear, m)?)?;
    m.add_function(wrap_pyfunction!(apply_knowledge_mask, m)?)?;
    m.add_function(wrap_pyfunction!(kl_gaussian_diag, m)?)?;
    m.add_function(wrap_pyfunction!(uniqueness_recovery_test, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
