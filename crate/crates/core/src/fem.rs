//! Structured-mesh P1 Darcy solver: −∇·(z∇u) = f on [0,1]^d with
//! homogeneous Dirichlet data.
//!
//! Weak-form residuals are evaluated by shifted-array arithmetic on the nodal
//! grid; no sparse matrix is assembled. With double indexing (j = x₂ row,
//! k = x₁ column) and z taken piecewise constant per grid cell from the
//! cell's top-left node, the interior residual is
//!
//!   r_jk = −r_{x₁,jk} − r_{x₂,jk} + r_{f,jk},
//!
//!   r_{x₁,jk} = ½((z_{j−1,k−1}+z_{j,k−1})(u_{j,k}−u_{j,k−1})
//!             − (z_{j,k}+z_{j−1,k})(u_{j,k+1}−u_{j,k})),
//!   r_{x₂,jk} = ½((z_{j,k−1}+z_{j,k})(u_{j,k}−u_{j+1,k})
//!             − (z_{j−1,k}+z_{j−1,k−1})(u_{j−1,k}−u_{j,k})),
//!   r_{f,jk}  = h²/9 (3f_{j,k} + f_{j−1,k−1} + f_{j,k−1} + f_{j+1,k}
//!             + f_{j+1,k+1} + f_{j,k+1} + f_{j−1,k}),
//!
//! the load using one-point Gauss integration per triangle. The 1D analogue
//! takes z from the left node of each element and a mass-lumped load:
//! r_j = −(1/h)(z_{j−1}(u_j−u_{j−1}) + z_j(u_j−u_{j+1})) + h f_j.
//!
//! The stiffness part of the residual is symmetric positive definite for
//! z > 0, so the linear solve uses conjugate gradients on its action.

use crate::error::{Error, Result};
use crate::mesh::{Dim, Mesh};
use crate::randfield::{push_sample_with_table, Family, NodalField, PriorSpec, SynthesisTable};
use crate::seeds::{rng_for, substream, Stream};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

fn require_same_mesh(fields: &[&NodalField]) -> Result<Mesh> {
    let mesh = fields[0].mesh;
    for f in fields {
        if f.mesh != mesh {
            return Err(Error::shape("fields live on different meshes"));
        }
    }
    Ok(mesh)
}

fn require_dirichlet(u: &NodalField) -> Result<()> {
    for i in 0..u.mesh.node_count() {
        if u.mesh.is_boundary(i) && u.values[i] != 0.0 {
            return Err(Error::invalid(format!(
                "u must vanish on the boundary; node {i} holds {}",
                u.values[i]
            )));
        }
    }
    Ok(())
}

/// Stiffness action Au on the interior nodes, for full-grid u (boundary
/// entries participate as data). Writes into `out` (length = interior count).
pub fn stiffness_apply(z: &[f64], u: &[f64], mesh: Mesh, out: &mut [f64]) {
    let n = mesh.n;
    match mesh.dim {
        Dim::One => {
            let inv_h = 1.0 / mesh.h();
            for j in 1..n - 1 {
                out[j - 1] = inv_h * (z[j - 1] * (u[j] - u[j - 1]) + z[j] * (u[j] - u[j + 1]));
            }
        }
        Dim::Two => {
            let m = n - 2;
            for j in 1..n - 1 {
                for k in 1..n - 1 {
                    let c = j * n + k;
                    let rx1 = 0.5
                        * ((z[c - n - 1] + z[c - 1]) * (u[c] - u[c - 1])
                            - (z[c] + z[c - n]) * (u[c + 1] - u[c]));
                    let rx2 = 0.5
                        * ((z[c - 1] + z[c]) * (u[c] - u[c + n])
                            - (z[c - n] + z[c - n - 1]) * (u[c - n] - u[c]));
                    out[(j - 1) * m + (k - 1)] = rx1 + rx2;
                }
            }
        }
    }
}

/// Transpose of [`stiffness_apply`]: scatter an interior cotangent back to
/// the full grid, accumulating into `out` (length = node count).
pub fn stiffness_apply_transpose(z: &[f64], g: &[f64], mesh: Mesh, out: &mut [f64]) {
    let n = mesh.n;
    match mesh.dim {
        Dim::One => {
            let inv_h = 1.0 / mesh.h();
            for j in 1..n - 1 {
                let gj = g[j - 1] * inv_h;
                out[j] += gj * (z[j - 1] + z[j]);
                out[j - 1] -= gj * z[j - 1];
                out[j + 1] -= gj * z[j];
            }
        }
        Dim::Two => {
            let m = n - 2;
            for j in 1..n - 1 {
                for k in 1..n - 1 {
                    let c = j * n + k;
                    let gi = g[(j - 1) * m + (k - 1)];
                    let w_w = 0.5 * (z[c - n - 1] + z[c - 1]);
                    let w_e = 0.5 * (z[c] + z[c - n]);
                    let w_s = 0.5 * (z[c - 1] + z[c]);
                    let w_n = 0.5 * (z[c - n] + z[c - n - 1]);
                    out[c] += gi * (w_w + w_e + w_s + w_n);
                    out[c - 1] -= gi * w_w;
                    out[c + 1] -= gi * w_e;
                    out[c + n] -= gi * w_s;
                    out[c - n] -= gi * w_n;
                }
            }
        }
    }
}

/// Tested load vector on the interior nodes.
pub fn load_vector(f: &NodalField) -> Vec<f64> {
    let mesh = f.mesh;
    let n = mesh.n;
    let h = mesh.h();
    let v = &f.values;
    match mesh.dim {
        Dim::One => (1..n - 1).map(|j| h * v[j]).collect(),
        Dim::Two => {
            let w = h * h / 9.0;
            let mut out = Vec::with_capacity(mesh.interior_count());
            for j in 1..n - 1 {
                for k in 1..n - 1 {
                    let c = j * n + k;
                    out.push(
                        w * (3.0 * v[c]
                            + v[c - n - 1]
                            + v[c - 1]
                            + v[c + n]
                            + v[c + n + 1]
                            + v[c + 1]
                            + v[c - n]),
                    );
                }
            }
            out
        }
    }
}

fn residual_impl(z: &NodalField, u: &NodalField, f: &NodalField) -> Result<Vec<f64>> {
    let mesh = require_same_mesh(&[z, u, f])?;
    require_dirichlet(u)?;
    let mut au = vec![0.0; mesh.interior_count()];
    stiffness_apply(&z.values, &u.values, mesh, &mut au);
    let b = load_vector(f);
    Ok(b.iter().zip(&au).map(|(b, a)| b - a).collect())
}

/// Interior weak-form residual on a 1D mesh.
pub fn residual_1d(z: &NodalField, u: &NodalField, f: &NodalField) -> Result<Vec<f64>> {
    if z.mesh.dim != Dim::One {
        return Err(Error::shape("residual_1d expects a 1D mesh"));
    }
    residual_impl(z, u, f)
}

/// Interior weak-form residual on a 2D mesh, by array shifting only.
pub fn residual_2d(z: &NodalField, u: &NodalField, f: &NodalField) -> Result<Vec<f64>> {
    if z.mesh.dim != Dim::Two {
        return Err(Error::shape("residual_2d expects a 2D mesh"));
    }
    residual_impl(z, u, f)
}

/// Dimension-dispatching residual.
pub fn residual(z: &NodalField, u: &NodalField, f: &NodalField) -> Result<Vec<f64>> {
    residual_impl(z, u, f)
}

#[derive(Debug, Clone, Copy)]
pub struct SolveOptions {
    /// Relative residual target: ‖b − Au‖₂ ≤ tol·‖b‖₂.
    pub tol: f64,
    /// Iteration cap; defaults to 10·(interior count).
    pub max_iters: Option<usize>,
    /// Diagonal (Jacobi) preconditioner.
    pub jacobi: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-10,
            max_iters: None,
            jacobi: false,
        }
    }
}

fn stiffness_diagonal(z: &[f64], mesh: Mesh) -> Vec<f64> {
    let n = mesh.n;
    match mesh.dim {
        Dim::One => {
            let inv_h = 1.0 / mesh.h();
            (1..n - 1).map(|j| inv_h * (z[j - 1] + z[j])).collect()
        }
        Dim::Two => {
            let mut out = Vec::with_capacity(mesh.interior_count());
            for j in 1..n - 1 {
                for k in 1..n - 1 {
                    let c = j * n + k;
                    out.push(z[c - n - 1] + z[c - 1] + z[c] + z[c - n]);
                }
            }
            out
        }
    }
}

/// Solve the Darcy problem by conjugate gradients on the stiffness action.
///
/// Returns u on the full grid with exactly zero boundary values, satisfying
/// ‖residual(z, u, f)‖₂ ≤ tol·‖load‖₂. Non-convergence within the iteration
/// cap is an explicit error carrying the iteration count and residual norm.
pub fn solve_darcy(z: &NodalField, f: &NodalField, tol: f64) -> Result<NodalField> {
    solve_darcy_opts(
        z,
        f,
        SolveOptions {
            tol,
            ..SolveOptions::default()
        },
    )
}

pub fn solve_darcy_opts(z: &NodalField, f: &NodalField, opts: SolveOptions) -> Result<NodalField> {
    let mesh = require_same_mesh(&[z, f])?;
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("solver tolerance must be positive"));
    }
    if z.values.iter().any(|&v| v <= 0.0) {
        return Err(Error::invalid(
            "permeability must be strictly positive for ellipticity",
        ));
    }
    let d_o = mesh.interior_count();
    let interior = mesh.interior_nodes();
    let b = load_vector(f);
    let b_norm = norm2(&b);
    let mut u_full = vec![0.0; mesh.node_count()];
    if b_norm == 0.0 {
        return NodalField::new(mesh, u_full);
    }

    let max_iters = opts.max_iters.unwrap_or(10 * d_o);
    let precond: Option<Vec<f64>> = opts
        .jacobi
        .then(|| stiffness_diagonal(&z.values, mesh).iter().map(|d| 1.0 / d).collect());

    let mut scratch = vec![0.0; mesh.node_count()];
    let mut apply = |x: &[f64], out: &mut [f64]| {
        for (idx, &node) in interior.iter().enumerate() {
            scratch[node] = x[idx];
        }
        stiffness_apply(&z.values, &scratch, mesh, out);
    };

    let mut x = vec![0.0; d_o];
    let mut r = b.clone();
    let mut zv = match &precond {
        Some(dinv) => r.iter().zip(dinv).map(|(r, d)| r * d).collect::<Vec<_>>(),
        None => r.clone(),
    };
    let mut p = zv.clone();
    let mut rz = dot(&r, &zv);
    let mut ap = vec![0.0; d_o];
    let mut iters = 0usize;

    loop {
        let r_norm = norm2(&r);
        if r_norm <= opts.tol * b_norm {
            // guard against recurrence drift with a true residual
            apply(&x, &mut ap);
            for i in 0..d_o {
                r[i] = b[i] - ap[i];
            }
            if norm2(&r) <= opts.tol * b_norm {
                break;
            }
            match &precond {
                Some(dinv) => {
                    for i in 0..d_o {
                        zv[i] = r[i] * dinv[i];
                    }
                }
                None => zv.copy_from_slice(&r),
            }
            p.copy_from_slice(&zv);
            rz = dot(&r, &zv);
        }
        if iters >= max_iters {
            return Err(Error::SolverDiverged {
                iters,
                rel_residual: norm2(&r) / b_norm,
            });
        }
        apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            return Err(Error::SolverDiverged {
                iters,
                rel_residual: norm2(&r) / b_norm,
            });
        }
        let alpha = rz / pap;
        for i in 0..d_o {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        match &precond {
            Some(dinv) => {
                for i in 0..d_o {
                    zv[i] = r[i] * dinv[i];
                }
            }
            None => zv.copy_from_slice(&r),
        }
        let rz_new = dot(&r, &zv);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..d_o {
            p[i] = zv[i] + beta * p[i];
        }
        iters += 1;
    }

    for (idx, &node) in interior.iter().enumerate() {
        u_full[node] = x[idx];
    }
    NodalField::new(mesh, u_full)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Nodal values of u at the listed interior nodes, in listed order.
pub fn observe(u: &NodalField, obs_nodes: &[usize]) -> Result<Vec<f64>> {
    for &node in obs_nodes {
        if node >= u.mesh.node_count() || u.mesh.is_boundary(node) {
            return Err(Error::invalid(format!(
                "observation node {node} is out of range or on the boundary"
            )));
        }
    }
    Ok(obs_nodes.iter().map(|&n| u.values[n]).collect())
}

/// One synthetic observation: observe(solve(z, f)) plus centred Gaussian
/// noise of standard deviation `gamma_std`, deterministic per `noise_seed`.
pub fn simulate_observation(
    z: &NodalField,
    f: &NodalField,
    obs_nodes: &[usize],
    gamma_std: f64,
    noise_seed: u64,
) -> Result<Vec<f64>> {
    if !(gamma_std >= 0.0) {
        return Err(Error::invalid("gamma_std must be >= 0"));
    }
    let u = solve_darcy_opts(z, f, SolveOptions::default())?;
    let mut y = observe(&u, obs_nodes)?;
    if gamma_std > 0.0 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
        for v in y.iter_mut() {
            let e: f64 = rng.sample(StandardNormal);
            *v += gamma_std * e;
        }
    }
    Ok(y)
}

use rand_chacha::rand_core::SeedableRng;

/// Fixed parameters of the generating prior, echoed in dataset metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixedParams {
    pub beta: f64,
    pub tau: f64,
    pub sigma: f64,
    pub modes_j: usize,
    pub modes_k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSeeds {
    pub master: u64,
    /// Observation locations are one draw shared across all systems.
    pub shared_obs_nodes: bool,
}

/// N observation vectors with their generation metadata. Serializes as a
/// single JSON document with fixed field order and full double precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub version: u32,
    pub family: Family,
    pub true_alpha: Option<Vec<f64>>,
    pub fixed_params: FixedParams,
    #[serde(rename = "N")]
    pub n_systems: usize,
    pub d_y: usize,
    pub gamma_std: f64,
    pub f_const: f64,
    pub mesh: Mesh,
    pub obs_nodes: Vec<usize>,
    pub seeds: DatasetSeeds,
    pub observations: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn validate(&self) -> Result<()> {
        if self.observations.len() != self.n_systems {
            return Err(Error::invalid("observation count does not match N"));
        }
        if self.obs_nodes.len() != self.d_y {
            return Err(Error::invalid("obs_nodes length does not match d_y"));
        }
        for row in &self.observations {
            if row.len() != self.d_y {
                return Err(Error::invalid("observation row length does not match d_y"));
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid("observations must be finite"));
            }
        }
        for &node in &self.obs_nodes {
            if node >= self.mesh.node_count() || self.mesh.is_boundary(node) {
                return Err(Error::invalid(format!(
                    "observation node {node} is not interior"
                )));
            }
        }
        if !(self.gamma_std >= 0.0) {
            return Err(Error::invalid("gamma_std must be >= 0"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ds: Dataset = serde_json::from_str(s)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Draw `d_y` observation nodes uniformly without replacement over the
/// interior, shared across all systems; deterministic per master seed.
pub fn draw_obs_nodes(mesh: Mesh, d_y: usize, master_seed: u64) -> Result<Vec<usize>> {
    let interior = mesh.interior_nodes();
    if d_y < 1 || d_y > interior.len() {
        return Err(Error::invalid(format!(
            "d_y = {d_y} must lie in 1..={}",
            interior.len()
        )));
    }
    let mut rng = rng_for(master_seed, Stream::ObsNodes, 0);
    let mut pool = interior;
    // partial Fisher–Yates
    let mut nodes = Vec::with_capacity(d_y);
    for i in 0..d_y {
        let pick = rng.gen_range(i..pool.len());
        pool.swap(i, pick);
        nodes.push(pool[i]);
    }
    Ok(nodes)
}

/// Generate a synthetic dataset: N independent systems, each with its own
/// coefficient draw and observation noise, observed at one shared node set.
pub fn generate_dataset(
    true_spec: &PriorSpec,
    n_systems: usize,
    d_y: usize,
    gamma_std: f64,
    f_const: f64,
    mesh: Mesh,
    master_seed: u64,
) -> Result<Dataset> {
    true_spec.validate()?;
    if true_spec.dim != mesh.dim {
        return Err(Error::shape("prior and mesh dimensions differ"));
    }
    if n_systems < 1 {
        return Err(Error::invalid("need at least one system"));
    }
    if !(gamma_std >= 0.0) {
        return Err(Error::invalid("gamma_std must be >= 0"));
    }
    let obs_nodes = draw_obs_nodes(mesh, d_y, master_seed)?;
    let f = NodalField::constant(mesh, f_const);
    let table = SynthesisTable::new(true_spec, mesh)?;

    let observations: Vec<Vec<f64>> = (0..n_systems)
        .into_par_iter()
        .map(|i| {
            let z = push_sample_with_table(
                true_spec,
                substream(master_seed, Stream::DataLatent, i as u64),
                &table,
            )?;
            simulate_observation(
                &z,
                &f,
                &obs_nodes,
                gamma_std,
                substream(master_seed, Stream::DataNoise, i as u64),
            )
        })
        .collect::<Result<Vec<_>>>()?;

    let ds = Dataset {
        version: 1,
        family: true_spec.family,
        true_alpha: Some(true_spec.alpha.clone()),
        fixed_params: FixedParams {
            beta: true_spec.beta,
            tau: true_spec.tau,
            sigma: true_spec.sigma,
            modes_j: true_spec.modes_j,
            modes_k: true_spec.modes_k,
        },
        n_systems,
        d_y,
        gamma_std,
        f_const,
        mesh,
        obs_nodes,
        seeds: DatasetSeeds {
            master: master_seed,
            shared_obs_nodes: true,
        },
        observations,
    };
    ds.validate()?;
    Ok(ds)
}
