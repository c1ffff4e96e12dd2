//! Python bindings: Gaussian references, location-scatter populations,
//! congruent systems and the training loop.

use barywin::bench::BASELINE_SAMPLES;
use barywin::congruent::{CongruentSystem, SystemDescriptor};
use barywin::gaussian_ref::{self, GaussianMeasure};
use barywin::linalg::SpdMatrix;
use barywin::measures::{make_scatter_population, BaseKind, LocationScatterSpec, Sampler};
use barywin::nn::{Batch, Mlp};
use barywin::rng;
use barywin::win::{self, IterationMetrics, WinConfig};
use barywin::Error;
use nalgebra::{DMatrix, DVector};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io(io) => PyOSError::new_err(io.to_string()),
        e if e.is_numerical() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for barywin::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn rows(x: &Batch) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn to_batch(points: Vec<Vec<f64>>) -> PyResult<Batch> {
    let d = points.first().map_or(0, Vec::len);
    if points.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("points must all have the same length"));
    }
    Batch::from_shape_vec((points.len(), d), points.into_iter().flatten().collect()).map_err(|e| PyValueError::new_err(e.to_string()))
}

fn square(m: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let d = m.len();
    if m.iter().any(|r| r.len() != d) {
        return Err(PyValueError::new_err("matrix must be square"));
    }
    Ok(DMatrix::from_fn(d, d, |i, j| m[i][j]))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn json_of(v: &Bound<'_, PyAny>) -> PyResult<Value> {
    if v.is_none() {
        Ok(Value::Null)
    } else if let Ok(b) = v.cast::<pyo3::types::PyBool>() {
        Ok(Value::Bool(b.is_true()))
    } else if let Ok(i) = v.extract::<i64>() {
        Ok(i.into())
    } else if let Ok(f) = v.extract::<f64>() {
        serde_json::Number::from_f64(f).map(Value::Number).ok_or_else(|| PyValueError::new_err("non-finite number"))
    } else if let Ok(s) = v.extract::<String>() {
        Ok(Value::String(s))
    } else if let Ok(d) = v.cast::<PyDict>() {
        let mut map = serde_json::Map::new();
        for (k, item) in d.iter() {
            map.insert(k.extract::<String>()?, json_of(&item)?);
        }
        Ok(Value::Object(map))
    } else if let Ok(l) = v.cast::<PyList>() {
        Ok(Value::Array(l.iter().map(|x| json_of(&x)).collect::<PyResult<_>>()?))
    } else {
        Err(PyValueError::new_err(format!("unsupported value {v}")))
    }
}

/// A Gaussian measure `N(mean, cov)`.
#[pyclass(name = "Gaussian", module = "barywin", frozen, from_py_object)]
#[derive(Clone)]
struct PyGaussian {
    inner: GaussianMeasure,
}

#[pymethods]
impl PyGaussian {
    #[new]
    fn new(mean: Vec<f64>, cov: Vec<Vec<f64>>) -> PyResult<Self> {
        let cov = SpdMatrix::new(square(cov)?).py()?;
        Ok(PyGaussian {
            inner: GaussianMeasure::new_psd(DVector::from_vec(mean), cov).py()?,
        })
    }

    #[staticmethod]
    fn standard(dim: usize) -> Self {
        PyGaussian {
            inner: GaussianMeasure::standard(dim),
        }
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn mean(&self) -> Vec<f64> {
        self.inner.mean.iter().copied().collect()
    }

    #[getter]
    fn cov(&self) -> Vec<Vec<f64>> {
        matrix_rows(self.inner.cov.as_matrix())
    }

    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let s = Sampler::gaussian(&self.inner.mean, &self.inner.cov).py()?;
        Ok(rows(&s.sample_seeded(seed, n).py()?))
    }

    fn __repr__(&self) -> String {
        format!("Gaussian(mean={:?}, cov={:?})", self.mean(), self.cov())
    }
}

/// Squared Bures-Wasserstein distance under the half-cost convention.
#[pyfunction]
fn bures_w2_sq(p: &PyGaussian, q: &PyGaussian) -> PyResult<f64> {
    gaussian_ref::bures_w2_sq(&p.inner, &q.inner).py()
}

/// Exact barycenter of Gaussians.
#[pyfunction]
fn gaussian_barycenter(measures: Vec<PyGaussian>, weights: Vec<f64>) -> PyResult<PyGaussian> {
    let ms: Vec<_> = measures.into_iter().map(|m| m.inner).collect();
    Ok(PyGaussian {
        inner: gaussian_ref::gaussian_barycenter_measure(&ms, &weights).py()?,
    })
}

/// `100 · BW²(estimate, truth) / (½ tr Σ_truth)`.
#[pyfunction]
fn bw2_uvp(estimate: &PyGaussian, truth: &PyGaussian) -> PyResult<f64> {
    gaussian_ref::bw2_uvp(&estimate.inner, &truth.inner).py()
}

/// Closed-form OT map from `p` to `q` as `(matrix, shift)`.
#[pyfunction]
fn gaussian_ot_map(p: &PyGaussian, q: &PyGaussian) -> PyResult<(Vec<Vec<f64>>, Vec<f64>)> {
    let t = gaussian_ref::gaussian_ot_map(&p.inner, &q.inner).py()?;
    Ok((matrix_rows(t.matrix()), t.shift().iter().copied().collect()))
}

/// Location-scatter population with an exactly known barycenter.
#[pyclass(name = "ScatterPopulation", module = "barywin", frozen)]
struct PyPopulation {
    spec: LocationScatterSpec,
    inputs: Vec<Sampler>,
}

#[pymethods]
impl PyPopulation {
    #[new]
    #[pyo3(signature = (dim, n = 4, seed = 0, weights = None, base = "gaussian"))]
    fn new(dim: usize, n: usize, seed: u64, weights: Option<Vec<f64>>, base: &str) -> PyResult<Self> {
        let base: BaseKind = base.parse().py()?;
        let mut spec = make_scatter_population(dim, n, seed).py()?.with_base(base);
        if let Some(w) = weights {
            spec = spec.with_weights(&w).py()?;
        }
        let inputs = spec.samplers().py()?;
        Ok(PyPopulation { spec, inputs })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.spec.dim()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.spec.weights.clone()
    }

    fn __len__(&self) -> usize {
        self.inputs.len()
    }

    fn truth(&self) -> PyResult<PyGaussian> {
        Ok(PyGaussian {
            inner: gaussian_ref::location_scatter_truth(&self.spec).py()?,
        })
    }

    fn member(&self, index: usize) -> PyResult<PyGaussian> {
        let ms = gaussian_ref::location_scatter_members(&self.spec).py()?;
        ms.into_iter()
            .nth(index)
            .map(|inner| PyGaussian { inner })
            .ok_or_else(|| PyValueError::new_err(format!("no member {index}")))
    }

    fn sample(&self, index: usize, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let s = self
            .inputs
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("no member {index}")))?;
        Ok(rows(&s.sample_seeded(seed, n).py()?))
    }

    /// UVP of the constant-shift baseline (about 100 by construction).
    fn constant_shift_uvp(&self, seed: u64) -> PyResult<f64> {
        let truth = gaussian_ref::location_scatter_truth(&self.spec).py()?;
        let cs = win::constant_shift_baseline(&self.inputs, &self.spec.weights, BASELINE_SAMPLES, &mut rng::stream(seed, rng::BASELINE, 0)).py()?;
        cs.uvp(&truth).py()
    }
}

/// Training budget; `replace(**changes)` returns an edited copy.
#[pyclass(name = "WinConfig", module = "barywin", frozen, skip_from_py_object)]
#[derive(Clone)]
struct PyWinConfig {
    inner: WinConfig,
}

#[pymethods]
impl PyWinConfig {
    /// The reduced single-core budget.
    #[staticmethod]
    fn desk() -> Self {
        PyWinConfig { inner: WinConfig::desk() }
    }

    /// The full-size budget.
    #[staticmethod]
    fn full() -> Self {
        PyWinConfig {
            inner: WinConfig::default(),
        }
    }

    #[pyo3(signature = (**changes))]
    fn replace(&self, changes: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut v = serde_json::to_value(&self.inner).map_err(|e| PyValueError::new_err(e.to_string()))?;
        if let Some(c) = changes {
            for (k, item) in c.iter() {
                v[k.extract::<String>()?] = json_of(&item)?;
            }
        }
        let inner: WinConfig = serde_json::from_value(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
        inner.validate().py()?;
        Ok(PyWinConfig { inner })
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.inner).expect("config serializes")
    }

    fn __repr__(&self) -> String {
        format!("WinConfig({})", self.to_json())
    }
}

/// Outcome of `train`.
#[pyclass(name = "TrainResult", module = "barywin", frozen)]
struct PyTrainResult {
    generator: Mlp,
    timeline: Vec<IterationMetrics>,
    moments: GaussianMeasure,
}

#[pymethods]
impl PyTrainResult {
    #[getter]
    fn final_uvp(&self) -> Option<f64> {
        self.timeline.last().and_then(|m| m.uvp_vs_truth)
    }

    /// One dict per outer iteration.
    #[getter]
    fn timeline<'py>(&self, py: Python<'py>) -> PyResult<Vec<Bound<'py, PyDict>>> {
        self.timeline
            .iter()
            .map(|m| {
                let d = PyDict::new(py);
                d.set_item("outer_iter", m.outer_iter)?;
                d.set_item("proxy_objective", m.proxy_objective)?;
                d.set_item("uvp_vs_truth", m.uvp_vs_truth)?;
                d.set_item("loss_g_mean", m.loss_g_mean)?;
                Ok(d)
            })
            .collect()
    }

    /// Moments of the generated measure on the evaluation batch.
    fn moments(&self) -> PyGaussian {
        PyGaussian {
            inner: self.moments.clone(),
        }
    }

    /// Draws from the trained generator.
    fn sample(&self, n: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let latent = barywin::measures::base_sampler(BaseKind::Gaussian, self.generator.input_dim()).py()?;
        let z = latent.sample_seeded(seed, n).py()?;
        Ok(rows(&self.generator.forward(&z.view()).py()?))
    }

    fn descent_violations(&self, jitter: f64) -> Vec<usize> {
        win::descent_violations(&self.timeline, jitter)
    }
}

/// Trains a generator toward the population barycenter, tracking UVP against the exact answer.
#[pyfunction]
#[pyo3(signature = (population, config = None, seed = 0))]
fn train(py: Python<'_>, population: &PyPopulation, config: Option<&PyWinConfig>, seed: u64) -> PyResult<PyTrainResult> {
    let cfg = config.map_or_else(WinConfig::desk, |c| c.inner.clone());
    let out = py
        .detach(|| {
            let truth = gaussian_ref::location_scatter_truth(&population.spec)?;
            win::train(&population.inputs, &population.spec.weights, &cfg, seed, Some(&truth))
        })
        .py()?;
    Ok(PyTrainResult {
        generator: out.state.generator,
        timeline: out.timeline,
        moments: out.final_moments,
    })
}

/// Convex potentials whose gradients average to the identity.
#[pyclass(name = "CongruentSystem", module = "barywin", frozen)]
struct PyCongruentSystem {
    inner: CongruentSystem,
}

#[pymethods]
impl PyCongruentSystem {
    #[staticmethod]
    #[pyo3(signature = (dim, seed, lo = 0.3, hi = 3.0))]
    fn random_quadratic(dim: usize, seed: u64, lo: f64, hi: f64) -> PyResult<Self> {
        let inner = CongruentSystem::random_quadratic(dim, lo, hi, &mut rng::stream(seed, rng::DATASET, 0)).py()?;
        Ok(PyCongruentSystem { inner })
    }

    #[staticmethod]
    fn random_log_sum_exp(dim: usize, seed: u64) -> PyResult<Self> {
        let inner = CongruentSystem::random_log_sum_exp(dim, &mut rng::stream(seed, rng::DATASET, 0)).py()?;
        Ok(PyCongruentSystem { inner })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let d: SystemDescriptor = serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
        Ok(PyCongruentSystem {
            inner: CongruentSystem::from_descriptor(&d).py()?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json().to_string()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha().to_vec()
    }

    /// `∇ψₙ` at each point.
    fn grad(&self, n: usize, points: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        if n >= self.inner.num_measures() {
            return Err(PyValueError::new_err(format!("no potential {n}")));
        }
        let x = to_batch(points)?;
        Ok(rows(&self.inner.grad_batch(n, &x.view()).py()?))
    }

    /// Largest `‖Σ αₙ ∇ψₙ(x) − x‖` over the points.
    fn verify_congruence(&self, points: Vec<Vec<f64>>) -> PyResult<f64> {
        let x = to_batch(points)?;
        self.inner.verify_congruence(&x.view()).py()
    }
}

#[pymodule]
#[pyo3(name = "barywin")]
fn barywin_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", barywin::VERSION)?;
    m.add_class::<PyGaussian>()?;
    m.add_class::<PyPopulation>()?;
    m.add_class::<PyWinConfig>()?;
    m.add_class::<PyTrainResult>()?;
    m.add_class::<PyCongruentSystem>()?;
    m.add_function(wrap_pyfunction!(bures_w2_sq, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_barycenter, m)?)?;
    m.add_function(wrap_pyfunction!(bw2_uvp, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_ot_map, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
