//! Python bindings: response data, calibration, WAIC, factor analysis and
//! the scoring encoder.

use irt_core::advi::{self, FitConfig, GrmFit, Init};
use irt_core::encoder::{self, EncoderConfig, EncoderNet, ScoringTarget};
use irt_core::{commands, eval, factor, grm, io, sim, IrtError};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn to_py(e: IrtError) -> PyErr {
    match e.exit_code() {
        3 => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn rows_of(values: &[f64], width: usize) -> Vec<Vec<f64>> {
    values.chunks(width).map(<[f64]>::to_vec).collect()
}

/// Ordinal responses; codes are 1-based and `None` marks a missing cell.
#[pyclass(name = "ResponseMatrix", frozen)]
struct PyResponses {
    inner: grm::ResponseMatrix,
}

#[pymethods]
impl PyResponses {
    #[new]
    #[pyo3(signature = (rows, categories=None))]
    fn new(rows: Vec<Vec<Option<usize>>>, categories: Option<Vec<usize>>) -> PyResult<Self> {
        let inner = match categories {
            Some(c) => {
                let items = c.len();
                if rows.iter().any(|r| r.len() != items) {
                    return Err(PyValueError::new_err("row length does not match categories"));
                }
                grm::ResponseMatrix::new(rows.len(), items, rows.concat(), c)
            }
            None => grm::ResponseMatrix::from_rows(&rows),
        }
        .map_err(to_py)?;
        Ok(PyResponses { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (path, missing_token=String::new()))]
    fn load_csv(path: std::path::PathBuf, missing_token: String) -> PyResult<Self> {
        let format = io::ResponseFormat { missing_token, categories: None };
        Ok(PyResponses { inner: io::load_responses(&path, &format).map_err(to_py)? })
    }

    #[getter]
    fn persons(&self) -> usize {
        self.inner.persons()
    }

    #[getter]
    fn items(&self) -> usize {
        self.inner.items()
    }

    #[getter]
    fn categories(&self) -> Vec<usize> {
        self.inner.categories().to_vec()
    }

    fn rows(&self) -> Vec<Vec<Option<usize>>> {
        (0..self.inner.persons()).map(|p| self.inner.row(p)).collect()
    }

    fn __repr__(&self) -> String {
        format!("ResponseMatrix(persons={}, items={})", self.inner.persons(), self.inner.items())
    }
}

/// Draws a sparse truth and responses. Returns `(data, truth)` where truth
/// holds `traits`, `lambda` and the 1-based `assignment`.
#[pyfunction]
#[pyo3(signature = (persons, items, dims, categories=5, seed=0))]
fn simulate<'py>(
    py: Python<'py>,
    persons: usize,
    items: usize,
    dims: usize,
    categories: usize,
    seed: u64,
) -> PyResult<(PyResponses, Bound<'py, PyDict>)> {
    let spec = sim::TruthSpec { persons, items, dims, categories, ..Default::default() };
    let (truth, data) = sim::simulate(&spec, seed).map_err(to_py)?;
    let d = PyDict::new(py);
    d.set_item("traits", rows_of(&truth.traits, dims))?;
    d.set_item("lambda", rows_of(&truth.lambda, dims))?;
    let a: Vec<usize> = spec.resolved_assignment().iter().map(|k| k + 1).collect();
    d.set_item("assignment", a)?;
    Ok((PyResponses { inner: data }, d))
}

/// Graded-response probability of category `j` (1-based).
#[pyfunction]
fn grm_cat_prob(theta: f64, lam: f64, thresholds: Vec<f64>, j: usize) -> PyResult<f64> {
    grm::grm_cat_prob(theta, lam, &thresholds, j).map_err(to_py)
}

/// Mixture weights `λ^ν / Σ λ^ν`.
#[pyfunction]
#[pyo3(signature = (lam, nu=1.0))]
fn domain_weights(lam: Vec<f64>, nu: f64) -> PyResult<Vec<f64>> {
    grm::domain_weights(&lam, nu).map_err(to_py)
}

/// Varimax-rotated principal-axis loadings, one row per item.
#[pyfunction]
fn exploratory(data: &PyResponses, dims: usize) -> PyResult<Vec<Vec<f64>>> {
    let l = factor::exploratory(&data.inner, dims).map_err(to_py)?;
    Ok(rows_of(&l.values, l.dims))
}

/// WAIC of a persons × samples log-likelihood matrix.
#[pyfunction]
fn waic<'py>(py: Python<'py>, matrix: Vec<Vec<f64>>) -> PyResult<Bound<'py, PyDict>> {
    let s = matrix.first().map_or(0, Vec::len);
    if matrix.iter().any(|r| r.len() != s) {
        return Err(PyValueError::new_err("ragged matrix"));
    }
    let m = eval::PointwiseLogLik::new(matrix.len(), s, matrix.concat()).map_err(to_py)?;
    report_dict(py, &eval::waic(&m).map_err(to_py)?)
}

fn report_dict<'py>(py: Python<'py>, r: &eval::WaicReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("lppd", r.lppd)?;
    d.set_item("pwaic", r.pwaic)?;
    d.set_item("waic", r.waic)?;
    d.set_item("se", r.se)?;
    d.set_item("elpd", r.elpd)?;
    Ok(d)
}

/// A calibrated model.
#[pyclass(name = "Fit", frozen)]
struct PyFit {
    inner: GrmFit,
}

#[pymethods]
impl PyFit {
    #[getter]
    fn dims(&self) -> usize {
        self.inner.shape.dims
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    fn elbo_trace(&self) -> Vec<f64> {
        self.inner.trace.iter().map(|r| r.elbo).collect()
    }

    /// Posterior-mean traits, one row per person.
    fn trait_means(&self) -> Vec<Vec<f64>> {
        rows_of(&self.inner.trait_means(), self.inner.shape.dims)
    }

    /// Posterior-mean domain weights, one row per item.
    #[pyo3(signature = (draws=200, seed=0))]
    fn weights(&self, draws: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = self.inner.draws(draws, &mut rng).map_err(to_py)?;
        Ok(rows_of(&self.inner.weight_means(&d).map_err(to_py)?, self.inner.shape.dims))
    }

    #[pyo3(signature = (data, samples=1000, seed=0))]
    fn waic<'py>(&self, py: Python<'py>, data: &PyResponses, samples: usize, seed: u64) -> PyResult<Bound<'py, PyDict>> {
        let m = commands::fit_pointwise(&self.inner, &data.inner, samples, seed).map_err(to_py)?;
        report_dict(py, &eval::waic(&m).map_err(to_py)?)
    }
}

/// Calibrates the model with ADVI, starting from factor-analysis loadings.
#[pyfunction]
#[pyo3(signature = (data, dims, max_iters=20_000, mc_samples=8, step_size=1e-3, seed=0))]
fn fit(
    py: Python<'_>,
    data: &PyResponses,
    dims: usize,
    max_iters: usize,
    mc_samples: usize,
    step_size: f64,
    seed: u64,
) -> PyResult<PyFit> {
    let cfg = FitConfig { dims, max_iters, mc_samples, step_size, seed, ..FitConfig::default() };
    let inner = py
        .detach(|| advi::fit(&data.inner, &cfg, &Init::FactorAnalysis))
        .map_err(to_py)?;
    Ok(PyFit { inner })
}

/// Feed-forward scorer trained on a fit's posterior-mean traits.
#[pyclass(name = "Encoder", frozen)]
struct PyEncoder {
    inner: EncoderNet,
}

#[pymethods]
impl PyEncoder {
    #[getter]
    fn validation_mse(&self) -> f64 {
        self.inner.validation_mse
    }

    #[getter]
    fn layer_sizes(&self) -> Vec<usize> {
        self.inner.layer_sizes.clone()
    }

    /// Trait estimates for each response row.
    fn score(&self, rows: Vec<Vec<Option<usize>>>) -> PyResult<Vec<Vec<f64>>> {
        rows.iter()
            .map(|r| encoder::score(r, &self.inner).map_err(to_py))
            .collect()
    }
}

#[pyfunction]
#[pyo3(signature = (data, fit, epochs=300, step_size=3e-3, seed=0))]
fn train_encoder(data: &PyResponses, fit: &PyFit, epochs: usize, step_size: f64, seed: u64) -> PyResult<PyEncoder> {
    let t = ScoringTarget::new(fit.inner.shape.dims, fit.inner.trait_means()).map_err(to_py)?;
    let cfg = EncoderConfig { epochs, step_size, seed, ..EncoderConfig::default() };
    let inner = encoder::train_encoder(&data.inner, &t, &cfg, "").map_err(to_py)?;
    Ok(PyEncoder { inner })
}

#[pymodule]
fn irt_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyResponses>()?;
    m.add_class::<PyFit>()?;
    m.add_class::<PyEncoder>()?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(grm_cat_prob, m)?)?;
    m.add_function(wrap_pyfunction!(domain_weights, m)?)?;
    m.add_function(wrap_pyfunction!(exploratory, m)?)?;
    m.add_function(wrap_pyfunction!(waic, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(train_encoder, m)?)?;
    Ok(())
}
