//! Python bindings exposing the main types and operations: prior sampling,
//! the Darcy solve and residuals, empirical divergences, dataset generation,
//! the operator surrogate, and full config-driven runs.

use priorflow_core::calib;
use priorflow_core::config::{parse_config_str, Mode};
use priorflow_core::fem;
use priorflow_core::measure;
use priorflow_core::mesh::{Dim, Mesh as CoreMesh};
use priorflow_core::nop;
use priorflow_core::randfield::{self, NodalField, PriorSpec as CorePriorSpec};
use priorflow_core::runner;
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

fn err(e: priorflow_core::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "Mesh", from_py_object)]
#[derive(Clone)]
struct PyMesh {
    inner: CoreMesh,
}

#[pymethods]
impl PyMesh {
    #[new]
    fn new(dim: usize, n: usize) -> PyResult<Self> {
        let dim = Dim::from_usize(dim).map_err(err)?;
        Ok(PyMesh {
            inner: CoreMesh::new(dim, n).map_err(err)?,
        })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim.as_usize()
    }

    #[getter]
    fn n(&self) -> usize {
        self.inner.n
    }

    #[getter]
    fn h(&self) -> f64 {
        self.inner.h()
    }

    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    fn interior_nodes(&self) -> Vec<usize> {
        self.inner.interior_nodes()
    }

    fn __repr__(&self) -> String {
        format!("Mesh(dim={}, n={})", self.inner.dim.as_usize(), self.inner.n)
    }
}

#[pyclass(name = "PriorSpec", from_py_object)]
#[derive(Clone)]
struct PyPriorSpec {
    inner: CorePriorSpec,
}

#[pymethods]
impl PyPriorSpec {
    /// Level-set prior with alpha = (lambda, kappa_minus, kappa_plus).
    #[staticmethod]
    #[pyo3(signature = (lambda_, kappa_minus, kappa_plus, *, sharp=false, beta=4.0, tau=10.0, modes=20, modes_k=None, dim=1))]
    #[allow(clippy::too_many_arguments)]
    fn level_set(
        lambda_: f64,
        kappa_minus: f64,
        kappa_plus: f64,
        sharp: bool,
        beta: f64,
        tau: f64,
        modes: usize,
        modes_k: Option<usize>,
        dim: usize,
    ) -> PyResult<Self> {
        let dim = Dim::from_usize(dim).map_err(err)?;
        Ok(PyPriorSpec {
            inner: CorePriorSpec::level_set(
                sharp,
                lambda_,
                kappa_minus,
                kappa_plus,
                beta,
                tau,
                modes,
                modes_k.unwrap_or(modes),
                dim,
            )
            .map_err(err)?,
        })
    }

    /// Lognormal prior with alpha = (nu, ell).
    #[staticmethod]
    #[pyo3(signature = (nu, ell, *, sigma=1.0, modes=20, modes_k=None, dim=2))]
    fn lognormal(
        nu: f64,
        ell: f64,
        sigma: f64,
        modes: usize,
        modes_k: Option<usize>,
        dim: usize,
    ) -> PyResult<Self> {
        let dim = Dim::from_usize(dim).map_err(err)?;
        Ok(PyPriorSpec {
            inner: CorePriorSpec::lognormal(nu, ell, sigma, modes, modes_k.unwrap_or(modes), dim)
                .map_err(err)?,
        })
    }

    #[getter]
    fn family(&self) -> String {
        self.inner.family.name().to_string()
    }

    #[getter]
    fn alpha(&self) -> Vec<f64> {
        self.inner.alpha.clone()
    }

    fn with_alpha(&self, alpha: Vec<f64>) -> PyResult<Self> {
        Ok(PyPriorSpec {
            inner: self.inner.with_alpha(&alpha).map_err(err)?,
        })
    }

    /// Per-mode standard deviations of the latent expansion.
    fn spectrum(&self) -> PyResult<Vec<f64>> {
        self.inner.spectrum().map_err(err)
    }

    fn __repr__(&self) -> String {
        format!(
            "PriorSpec(family='{}', alpha={:?})",
            self.inner.family.name(),
            self.inner.alpha
        )
    }
}

fn field_from_vec(mesh: &PyMesh, values: Vec<f64>) -> PyResult<NodalField> {
    NodalField::new(mesh.inner, values).map_err(err)
}

/// Standard deviation of mode (j[, k]) of the level-set latent field.
#[pyfunction]
#[pyo3(signature = (j, lambda_, beta, k=None))]
fn levelset_stddev(j: usize, lambda_: f64, beta: f64, k: Option<usize>) -> PyResult<f64> {
    randfield::levelset_stddev(j, k, lambda_, beta).map_err(err)
}

/// Standard deviation of mode (j[, k]) of the Matérn-like latent field.
#[pyfunction]
#[pyo3(signature = (j, sigma, ell, nu, dim, k=None))]
fn matern_stddev(
    j: usize,
    sigma: f64,
    ell: f64,
    nu: f64,
    dim: usize,
    k: Option<usize>,
) -> PyResult<f64> {
    randfield::matern_stddev(j, k, sigma, ell, nu, dim).map_err(err)
}

/// One coefficient-field sample on the mesh, deterministic per seed.
#[pyfunction]
fn push_sample(spec: &PyPriorSpec, seed: u64, mesh: &PyMesh) -> PyResult<Vec<f64>> {
    Ok(randfield::push_sample(&spec.inner, seed, mesh.inner)
        .map_err(err)?
        .values)
}

/// Solve the Darcy problem for nodal permeability z and constant forcing.
#[pyfunction]
#[pyo3(signature = (z, f_const, mesh, tol=1e-10))]
fn solve_darcy(z: Vec<f64>, f_const: f64, mesh: &PyMesh, tol: f64) -> PyResult<Vec<f64>> {
    let z = field_from_vec(mesh, z)?;
    let f = NodalField::constant(mesh.inner, f_const);
    Ok(fem::solve_darcy(&z, &f, tol).map_err(err)?.values)
}

/// Interior weak-form residual of (z, u, f).
#[pyfunction]
fn residual(z: Vec<f64>, u: Vec<f64>, f_const: f64, mesh: &PyMesh) -> PyResult<Vec<f64>> {
    let z = field_from_vec(mesh, z)?;
    let u = field_from_vec(mesh, u)?;
    let f = NodalField::constant(mesh.inner, f_const);
    fem::residual(&z, &u, &f).map_err(err)
}

/// Values of u at the listed interior nodes.
#[pyfunction]
fn observe(u: Vec<f64>, obs_nodes: Vec<usize>, mesh: &PyMesh) -> PyResult<Vec<f64>> {
    let u = field_from_vec(mesh, u)?;
    fem::observe(&u, &obs_nodes).map_err(err)
}

/// Squared 1D Wasserstein-2 distance between equal-size samples.
#[pyfunction]
fn w2sq_1d(xs: Vec<f64>, ys: Vec<f64>) -> PyResult<f64> {
    measure::w2sq_1d(&xs, &ys).map_err(err)
}

/// Γ-weighted squared Wasserstein-2 distance of a point to a batch.
#[pyfunction]
fn w2sq_dirac(y: Vec<f64>, batch: Vec<Vec<f64>>, gamma_std: f64) -> PyResult<f64> {
    let b = measure::EmpiricalBatch::from_rows(&batch).map_err(err)?;
    measure::w2sq_dirac(&y, &b, gamma_std).map_err(err)
}

/// Monte Carlo weighted sliced squared Wasserstein-2 distance.
#[pyfunction]
fn sw2sq(
    x_batch: Vec<Vec<f64>>,
    y_batch: Vec<Vec<f64>>,
    gamma_std: f64,
    n_dirs: usize,
    seed: u64,
) -> PyResult<f64> {
    let xb = measure::EmpiricalBatch::from_rows(&x_batch).map_err(err)?;
    let yb = measure::EmpiricalBatch::from_rows(&y_batch).map_err(err)?;
    measure::sw2sq(&xb, &yb, gamma_std, n_dirs, seed).map_err(err)
}

/// Uniform unit directions, rows of a list of lists.
#[pyfunction]
fn sample_sphere(d: usize, n_dirs: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let ds = measure::sample_sphere(d, n_dirs, seed).map_err(err)?;
    Ok((0..ds.n_dirs).map(|i| ds.row(i).to_vec()).collect())
}

/// Generate a synthetic dataset and return it as a JSON string.
#[pyfunction]
#[pyo3(signature = (spec, n_systems, d_y, gamma_std, f_const, mesh, master_seed))]
fn generate_dataset_json(
    spec: &PyPriorSpec,
    n_systems: usize,
    d_y: usize,
    gamma_std: f64,
    f_const: f64,
    mesh: &PyMesh,
    master_seed: u64,
) -> PyResult<String> {
    let ds = fem::generate_dataset(
        &spec.inner,
        n_systems,
        d_y,
        gamma_std,
        f_const,
        mesh.inner,
        master_seed,
    )
    .map_err(err)?;
    ds.to_json().map_err(err)
}

/// KL divergence between scalar Gaussians.
#[pyfunction]
fn gaussian_kl(m: f64, s: f64, m0: f64, s0: f64) -> PyResult<f64> {
    calib::gaussian_kl(m, s, m0, s0).map_err(err)
}

/// Single-observation posterior recovery: returns
/// ((m_star, s_star), (m_analytic, s_analytic)).
#[pyfunction]
#[pyo3(signature = (y, gamma_std, n_samples=4096, steps=2000, seed=0))]
fn bayes_check(
    y: f64,
    gamma_std: f64,
    n_samples: usize,
    steps: usize,
    seed: u64,
) -> PyResult<((f64, f64), (f64, f64))> {
    let r = calib::bayes_check(y, gamma_std, n_samples, steps, seed).map_err(err)?;
    Ok(((r.m_star, r.s_star), (r.m_analytic, r.s_analytic)))
}

#[pyclass(name = "Operator")]
struct PyOperator {
    params: nop::OperatorParams,
    ctx: nop::FnoContext,
}

#[pymethods]
impl PyOperator {
    /// Randomly initialized spectral operator for the given mesh.
    #[new]
    #[pyo3(signature = (mesh, layers=2, channels=16, modes=8, seed=0))]
    fn new(mesh: &PyMesh, layers: usize, channels: usize, modes: usize, seed: u64) -> PyResult<Self> {
        let cfg = nop::FnoConfig {
            dim: mesh.inner.dim,
            n: mesh.inner.n,
            layers,
            channels,
            modes,
        };
        Ok(PyOperator {
            params: nop::OperatorParams::random(cfg, seed).map_err(err)?,
            ctx: nop::FnoContext::new(cfg).map_err(err)?,
        })
    }

    fn param_count(&self) -> usize {
        self.params.param_count()
    }

    /// Surrogate prediction for one coefficient field.
    fn forward(&self, z: Vec<f64>, mesh: &PyMesh) -> PyResult<Vec<f64>> {
        let z = field_from_vec(mesh, z)?;
        Ok(nop::fno_forward(&self.params, &z, &self.ctx)
            .map_err(err)?
            .values)
    }

    /// Mean squared residual norm over a batch of coefficient fields.
    fn residual_loss(&self, z_batch: Vec<Vec<f64>>, f_const: f64, mesh: &PyMesh) -> PyResult<f64> {
        let fields: Vec<NodalField> = z_batch
            .into_iter()
            .map(|z| field_from_vec(mesh, z))
            .collect::<PyResult<_>>()?;
        let f = NodalField::constant(mesh.inner, f_const);
        Ok(nop::residual_loss_j4(&self.params, &fields, &f, &self.ctx)
            .map_err(err)?
            .loss)
    }
}

/// Run one CLI mode from a TOML config string; returns the summary or report
/// JSON written by the run, when the mode produces one.
#[pyfunction]
#[pyo3(signature = (config_toml, mode, emit_plots=false))]
fn run_from_config(config_toml: &str, mode: &str, emit_plots: bool) -> PyResult<Option<String>> {
    let mut cfg = parse_config_str(config_toml).map_err(err)?;
    let mode: Mode = mode.parse().map_err(err)?;
    cfg.mode = Some(mode);
    let outcome = runner::run(&cfg, emit_plots).map_err(err)?;
    if !outcome.ok {
        return Err(PyValueError::new_err("run reported failure"));
    }
    let summary = cfg.out_dir.join("summary.json");
    if summary.exists() {
        Ok(Some(std::fs::read_to_string(summary).map_err(|e| {
            PyValueError::new_err(e.to_string())
        })?))
    } else {
        Ok(None)
    }
}

#[pymodule]
fn priorflow(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyMesh>()?;
    m.add_class::<PyPriorSpec>()?;
    m.add_class::<PyOperator>()?;
    m.add_function(wrap_pyfunction!(levelset_stddev, m)?)?;
    m.add_function(wrap_pyfunction!(matern_stddev, m)?)?;
    m.add_function(wrap_pyfunction!(push_sample, m)?)?;
    m.add_function(wrap_pyfunction!(solve_darcy, m)?)?;
    m.add_function(wrap_pyfunction!(residual, m)?)?;
    m.add_function(wrap_pyfunction!(observe, m)?)?;
    m.add_function(wrap_pyfunction!(w2sq_1d, m)?)?;
    m.add_function(wrap_pyfunction!(w2sq_dirac, m)?)?;
    m.add_function(wrap_pyfunction!(sw2sq, m)?)?;
    m.add_function(wrap_pyfunction!(sample_sphere, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset_json, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_kl, m)?)?;
    m.add_function(wrap_pyfunction!(bayes_check, m)?)?;
    m.add_function(wrap_pyfunction!(run_from_config, m)?)?;
    Ok(())
}
