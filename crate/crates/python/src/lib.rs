//! Python bindings for the updraft toolkit.

use std::path::PathBuf;

use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use updraft::dataprep::{PatchSample, SampleMeta, SynthConfig};
use updraft::loss::{LossConfig, RawParamMaps, WeightPolicy};
use updraft::model::{predict_params, Checkpoint};
use updraft::{grid_io, regrid, verify, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(_) => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Sinh-arcsinh distribution with location, scale, skewness and tailweight.
#[pyclass(name = "ShashParams", module = "updraft_py", from_py_object)]
#[derive(Clone, Copy)]
struct PyShash {
    inner: updraft::ShashParams,
}

#[pymethods]
impl PyShash {
    #[new]
    #[pyo3(signature = (mu, sigma, gamma = 0.0, tau = 1.0))]
    fn new(mu: f64, sigma: f64, gamma: f64, tau: f64) -> PyResult<Self> {
        updraft::ShashParams::new(mu, sigma, gamma, tau).map(|inner| PyShash { inner }).map_err(py_err)
    }

    #[getter]
    fn mu(&self) -> f64 {
        self.inner.mu
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma
    }

    #[getter]
    fn gamma(&self) -> f64 {
        self.inner.gamma
    }

    #[getter]
    fn tau(&self) -> f64 {
        self.inner.tau
    }

    fn pdf(&self, y: f64) -> f64 {
        self.inner.pdf(y)
    }

    fn log_pdf(&self, y: f64) -> f64 {
        self.inner.log_pdf(y)
    }

    fn cdf(&self, y: f64) -> f64 {
        self.inner.cdf(y)
    }

    fn quantile(&self, p: f64) -> PyResult<f64> {
        self.inner.quantile(p).map_err(py_err)
    }

    fn median(&self) -> f64 {
        self.inner.median()
    }

    /// Draws `n` samples from a generator seeded with `seed`.
    fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.inner.sample(&mut rng)).collect()
    }

    fn __repr__(&self) -> String {
        let p = self.inner;
        format!("ShashParams(mu={}, sigma={}, gamma={}, tau={})", p.mu, p.sigma, p.gamma, p.tau)
    }
}

fn unwrap_params(params: &[PyShash]) -> Vec<updraft::ShashParams> {
    params.iter().map(|p| p.inner).collect()
}

/// Maps raw network outputs onto distribution parameters.
#[pyfunction]
fn transform(y1: Vec<f64>, y2: Vec<f64>, y3: Vec<f64>, y4: Vec<f64>) -> PyResult<Vec<PyShash>> {
    let raw = RawParamMaps::new(y1, y2, y3, y4).map_err(py_err)?;
    let params = updraft::loss::transform(&raw).map_err(py_err)?;
    Ok(params.into_iter().map(|inner| PyShash { inner }).collect())
}

/// Weighted negative log-likelihood; returns the mean and per-pixel losses.
#[pyfunction]
#[pyo3(signature = (params, truth, threshold = 0.0, weight_above = 1.0, epsilon = 1e-7))]
fn nll(params: Vec<PyShash>, truth: Vec<f64>, threshold: f64, weight_above: f64, epsilon: f64) -> PyResult<(f64, Vec<f64>)> {
    let cfg = LossConfig { epsilon, weight_policy: WeightPolicy { threshold, weight_above } };
    cfg.validate().map_err(py_err)?;
    updraft::loss::nll(&unwrap_params(&params), &truth, &cfg).map_err(py_err)
}

#[pyfunction]
fn rmse(truth: Vec<f64>, pred: Vec<f64>) -> PyResult<f64> {
    verify::rmse(&truth, &pred).map_err(py_err)
}

#[pyfunction]
fn crmse(truth: Vec<f64>, pred: Vec<f64>, threshold: f64) -> PyResult<f64> {
    verify::crmse(&truth, &pred, threshold).map_err(py_err)
}

#[pyfunction]
fn iou(a: Vec<f64>, b: Vec<f64>, threshold: f64) -> PyResult<f64> {
    verify::iou(&a, &b, threshold).map_err(py_err)
}

#[pyfunction]
fn r_squared(truth: Vec<f64>, pred: Vec<f64>) -> PyResult<f64> {
    verify::r_squared(&truth, &pred).map_err(py_err)
}

#[pyfunction]
fn pit(params: Vec<PyShash>, truth: Vec<f64>) -> PyResult<Vec<f64>> {
    verify::pit(&unwrap_params(&params), &truth).map_err(py_err)
}

/// PIT histogram deviation of a set of PIT values over 10 bins.
#[pyfunction]
fn pitd(pit: Vec<f64>) -> PyResult<f64> {
    verify::PitHistogram::from_values(&pit).map(|h| verify::pitd(&h)).map_err(py_err)
}

#[pyfunction]
fn iqr_rate(params: Vec<PyShash>, truth: Vec<f64>) -> PyResult<f64> {
    verify::iqr_rate(&unwrap_params(&params), &truth).map_err(py_err)
}

#[pyfunction]
fn area_fraction(field: Vec<f64>, threshold: f64) -> PyResult<f64> {
    verify::area_fraction(&field, threshold).map_err(py_err)
}

/// A regular 3-D field with values stored flat as `[z, y, x]`.
#[pyclass(name = "Grid", module = "updraft_py", from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: grid_io::Grid3D,
}

#[pymethods]
impl PyGrid {
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        grid_io::read_grid(path).map(|inner| PyGrid { inner }).map_err(py_err)
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        grid_io::write_grid(&self.inner, path).map_err(py_err)
    }

    #[staticmethod]
    fn from_2d(name: String, units: String, y: Vec<f64>, x: Vec<f64>, values: Vec<f32>) -> PyResult<Self> {
        grid_io::Grid3D::from_2d(name, units, y, x, values).map(|inner| PyGrid { inner }).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn units(&self) -> String {
        self.inner.units.clone()
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.dims()
    }

    #[getter]
    fn z(&self) -> Vec<f64> {
        self.inner.z_coords.clone()
    }

    #[getter]
    fn y(&self) -> Vec<f64> {
        self.inner.y_coords.clone()
    }

    #[getter]
    fn x(&self) -> Vec<f64> {
        self.inner.x_coords.clone()
    }

    #[getter]
    fn values(&self) -> Vec<f32> {
        self.inner.values.clone()
    }

    fn composite_max(&self) -> PyResult<Self> {
        grid_io::composite_max(&self.inner).map(|inner| PyGrid { inner }).map_err(py_err)
    }

    fn nn_resample(&self, y: Vec<f64>, x: Vec<f64>) -> PyResult<Self> {
        regrid::nn_resample(&self.inner, &y, &x).map(|inner| PyGrid { inner }).map_err(py_err)
    }

    fn block_mean(&self, factor: usize) -> PyResult<Self> {
        regrid::block_mean(&self.inner, factor).map(|inner| PyGrid { inner }).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Grid(name={:?}, shape={:?})", self.inner.name, self.inner.dims())
    }
}

/// Generates one synthetic scene; returns (reflectivity, vertical velocity).
#[pyfunction]
#[pyo3(signature = (seed, ny = 64, nx = 64, nz = 12))]
fn synth_storms(seed: u64, ny: usize, nx: usize, nz: usize) -> PyResult<(PyGrid, PyGrid)> {
    let cfg = SynthConfig { ny, nx, nz, ..SynthConfig::default() };
    let (r, w) = updraft::dataprep::synth_storms(seed, &cfg).map_err(py_err)?;
    Ok((PyGrid { inner: r }, PyGrid { inner: w }))
}

/// A trained network loaded from a checkpoint.
#[pyclass(name = "Model", module = "updraft_py")]
struct PyModel {
    ckpt: Checkpoint,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Checkpoint::read(&path).map(|ckpt| PyModel { ckpt }).map_err(py_err)
    }

    #[getter]
    fn spec_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.ckpt.header.spec).map_err(|e| py_err(e.into()))
    }

    /// Predicts per-pixel distributions for one patch of raw reflectivity
    /// (dBZ, flat `[level, row, col]`); the stored scaler is applied first.
    fn predict(&self, dbz: Vec<f32>, levels: usize, height: usize, width: usize) -> PyResult<Vec<PyShash>> {
        if dbz.len() != levels * height * width {
            return Err(PyValueError::new_err(format!("expected {} values, got {}", levels * height * width, dbz.len())));
        }
        let x = match &self.ckpt.header.scaler {
            Some(s) => s.apply(&dbz),
            None => dbz,
        };
        let sample = PatchSample {
            levels,
            height,
            width,
            x,
            y: vec![0.0; height * width],
            meta: SampleMeta { source: "python".into(), origin: [0, 0] },
        };
        let params = predict_params(&self.ckpt.state, &[sample], 1).map_err(py_err)?;
        Ok(params.into_iter().flatten().map(|inner| PyShash { inner }).collect())
    }
}

#[pymodule]
fn updraft_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyShash>()?;
    m.add_class::<PyGrid>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(transform, m)?)?;
    m.add_function(wrap_pyfunction!(nll, m)?)?;
    m.add_function(wrap_pyfunction!(rmse, m)?)?;
    m.add_function(wrap_pyfunction!(crmse, m)?)?;
    m.add_function(wrap_pyfunction!(iou, m)?)?;
    m.add_function(wrap_pyfunction!(r_squared, m)?)?;
    m.add_function(wrap_pyfunction!(pit, m)?)?;
    m.add_function(wrap_pyfunction!(pitd, m)?)?;
    m.add_function(wrap_pyfunction!(iqr_rate, m)?)?;
    m.add_function(wrap_pyfunction!(area_fraction, m)?)?;
    m.add_function(wrap_pyfunction!(synth_storms, m)?)?;
    Ok(())
}
