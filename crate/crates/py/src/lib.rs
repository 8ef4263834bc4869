//! Python bindings. Matrices cross the boundary as lists of row lists.

use loldu_core::adapter::{AdapterError, InitKind, InitMethod};
use loldu_core::harness::gradcheck::{gradcheck_suite, Corruption};
use loldu_core::io::{self, FormatError, Precision, SaveMode};
use loldu_core::linalg::{self, DenseMatrix, LduFactors, LinalgError};
use loldu_core::optim::{self, ProjectionSpec};
use pyo3::exceptions::{PyArithmeticError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn linalg_err(e: LinalgError) -> PyErr {
    match e {
        LinalgError::SingularPivot { .. } => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn adapter_err(e: AdapterError) -> PyErr {
    match e {
        AdapterError::Linalg(inner) => linalg_err(inner),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn format_err(e: FormatError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<DenseMatrix> {
    DenseMatrix::from_rows(&rows).map_err(linalg_err)
}

fn parse_init(name: &str) -> PyResult<InitKind> {
    name.parse().map_err(PyValueError::new_err)
}

/// LoLDU adapter over a frozen weight matrix: `W = rsm + σ·Pᵀ·L_r·diag(z)·U_r`.
#[pyclass(name = "LolduAdapter", module = "loldu")]
struct PyLolduAdapter {
    inner: loldu_core::LolduAdapter,
}

#[pymethods]
impl PyLolduAdapter {
    #[new]
    #[pyo3(signature = (weight, rank, alpha=None, init="regular_ldu", seed=0))]
    fn new(
        weight: Vec<Vec<f64>>,
        rank: usize,
        alpha: Option<f64>,
        init: &str,
        seed: u64,
    ) -> PyResult<Self> {
        let w = matrix(weight)?;
        let method = InitMethod::new(parse_init(init)?, seed);
        let inner = loldu_core::LolduAdapter::new(&w, rank, alpha.unwrap_or(rank as f64), method)
            .map_err(adapter_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    #[getter]
    fn shape(&self) -> (usize, usize) {
        self.inner.base_shape()
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.inner.alpha()
    }

    #[getter]
    fn init(&self) -> String {
        self.inner.init().kind.to_string()
    }

    #[getter]
    fn perm(&self) -> Vec<usize> {
        self.inner.perm().to_vec()
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.inner.sigma()
    }

    #[setter]
    fn set_sigma(&mut self, sigma: f64) {
        self.inner.set_sigma(sigma);
    }

    #[getter]
    fn z(&self) -> Vec<f64> {
        self.inner.z().to_vec()
    }

    #[setter]
    fn set_z(&mut self, z: Vec<f64>) -> PyResult<()> {
        self.inner.set_z(z).map_err(adapter_err)
    }

    fn trainable_param_count(&self) -> usize {
        self.inner.trainable_param_count()
    }

    fn forward(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        self.inner.forward(&x).map_err(adapter_err)
    }

    /// Returns `(grad_z, grad_sigma)` for upstream gradient `upstream` at input `x`.
    fn gradients(&self, x: Vec<f64>, upstream: Vec<f64>) -> PyResult<(Vec<f64>, f64)> {
        let g = self.inner.gradients(&x, &upstream).map_err(adapter_err)?;
        Ok((g.z, g.sigma))
    }

    fn delta_w(&self) -> Vec<Vec<f64>> {
        self.inner.delta_w().to_rows()
    }

    fn merged_weight(&self) -> Vec<Vec<f64>> {
        self.inner.merged_weight().to_rows()
    }

    fn residual(&self) -> Vec<Vec<f64>> {
        self.inner.residual().to_rows()
    }

    /// Projects `(z, σ)` onto `‖z‖ ≤ epsilon`, `σ ∈ [sigma_min, 1]`.
    #[pyo3(signature = (epsilon, sigma_min=optim::DEFAULT_SIGMA_MIN))]
    fn project(&mut self, epsilon: f64, sigma_min: f64) -> PyResult<()> {
        let spec = ProjectionSpec::new(epsilon, sigma_min)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        let z = optim::project_z(self.inner.z(), spec.epsilon);
        self.inner.set_z(z).map_err(adapter_err)?;
        self.inner
            .set_sigma(optim::project_sigma(self.inner.sigma(), &spec));
        Ok(())
    }

    #[pyo3(signature = (compact=false, f32=false))]
    fn to_bytes<'py>(&self, py: Python<'py>, compact: bool, f32: bool) -> Bound<'py, PyBytes> {
        let mode = if compact {
            SaveMode::Compact
        } else {
            SaveMode::Full
        };
        let precision = if f32 { Precision::F32 } else { Precision::F64 };
        PyBytes::new(py, &io::save_adapter_with(&self.inner, mode, precision))
    }

    #[staticmethod]
    #[pyo3(signature = (data, base=None))]
    fn from_bytes(data: &[u8], base: Option<Vec<Vec<f64>>>) -> PyResult<Self> {
        let base = base.map(matrix).transpose()?;
        let inner = io::load_adapter(data, base.as_ref()).map_err(format_err)?;
        Ok(Self { inner })
    }

    fn __repr__(&self) -> String {
        let (m, n) = self.inner.base_shape();
        format!(
            "LolduAdapter(shape=({m}, {n}), rank={}, sigma={}, init={})",
            self.inner.rank(),
            self.inner.sigma(),
            self.inner.init().kind
        )
    }
}

/// Pivoted LDU factorization: returns `(perm, lower, diag, upper)`.
#[pyfunction]
#[allow(clippy::type_complexity)]
fn ldu(weight: Vec<Vec<f64>>) -> PyResult<(Vec<usize>, Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>)> {
    let f = linalg::ldu(&matrix(weight)?).map_err(linalg_err)?;
    Ok((f.perm, f.lower.to_rows(), f.diag, f.upper.to_rows()))
}

/// Inverse of [`ldu`].
#[pyfunction]
fn reconstruct(
    perm: Vec<usize>,
    lower: Vec<Vec<f64>>,
    diag: Vec<f64>,
    upper: Vec<Vec<f64>>,
) -> PyResult<Vec<Vec<f64>>> {
    let factors = LduFactors {
        perm,
        lower: matrix(lower)?,
        diag,
        upper: matrix(upper)?,
    };
    Ok(linalg::reconstruct(&factors).map_err(linalg_err)?.to_rows())
}

#[pyfunction]
fn project_z(z: Vec<f64>, epsilon: f64) -> PyResult<Vec<f64>> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(PyValueError::new_err("epsilon must be positive and finite"));
    }
    Ok(optim::project_z(&z, epsilon))
}

#[pyfunction]
#[pyo3(signature = (sigma, sigma_min=optim::DEFAULT_SIGMA_MIN))]
fn project_sigma(sigma: f64, sigma_min: f64) -> PyResult<f64> {
    let spec =
        ProjectionSpec::new(1.0, sigma_min).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(optim::project_sigma(sigma, &spec))
}

/// Runs the finite-difference suite; returns `(passed, max_rel_error)`.
#[pyfunction]
#[pyo3(signature = (count=20, seed=0, sign_flip=false))]
fn gradcheck(count: usize, seed: u64, sign_flip: bool) -> PyResult<(bool, f64)> {
    let corruption = if sign_flip {
        Corruption::SignFlip
    } else {
        Corruption::None
    };
    let report = gradcheck_suite(count, seed, corruption)
        .map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok((report.passed(), report.max_rel_error))
}

#[pymodule]
fn loldu(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLolduAdapter>()?;
    m.add_function(wrap_pyfunction!(ldu, m)?)?;
    m.add_function(wrap_pyfunction!(reconstruct, m)?)?;
    m.add_function(wrap_pyfunction!(project_z, m)?)?;
    m.add_function(wrap_pyfunction!(project_sigma, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add(
        "INIT_METHODS",
        InitKind::ALL.iter().map(|k| k.name()).collect::<Vec<_>>(),
    )?;
    Ok(())
}
