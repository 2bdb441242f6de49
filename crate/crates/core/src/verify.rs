//! Executable verification suites: the measure-theoretic identities as
//! numerical checks, solver correctness against an independent assembly
//! oracle, and gradient checks for the tape. The CLI `verify` mode runs
//! everything; the acceptance tests call the individual checks at their
//! stated scales.

use crate::error::Result;
use crate::fem;
use crate::measure::{sample_sphere, sw2sq, w2sq_1d, w2sq_dirac, EmpiricalBatch};
use crate::mesh::{Dim, Mesh};
use crate::nop::{self, FnoConfig};
use crate::randfield::NodalField;
use crate::seeds::{rng_for, Stream};
use crate::tape::{gradcheck, SpectralPlan, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use std::f64::consts::PI;
use std::sync::Arc;

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckResult {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

/// Brute-force element-by-element P1 assembly of the interior residual on
/// the diagonal-split triangulation, with z constant per cell from the
/// cell's top-left node and a one-point Gauss load. Independent of the
/// shifted-array path it is used to check.
pub fn dense_residual_oracle(z: &NodalField, u: &NodalField, f: &NodalField) -> Vec<f64> {
    let mesh = z.mesh;
    let n = mesh.n;
    let mut r = vec![0.0; mesh.node_count()];
    for j in 0..n - 1 {
        for k in 0..n - 1 {
            let zc = z.values[j * n + k];
            let tl = j * n + k;
            let tr = j * n + k + 1;
            let bl = (j + 1) * n + k;
            let br = (j + 1) * n + k + 1;
            for tri in [[tl, tr, br], [tl, bl, br]] {
                let pts: Vec<(f64, f64)> = tri.iter().map(|&i| mesh.coords(i)).collect();
                let (x0, y0) = pts[0];
                let (x1, y1) = pts[1];
                let (x2, y2) = pts[2];
                let area = 0.5 * ((x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)).abs();
                let bv = [y1 - y2, y2 - y0, y0 - y1];
                let cv = [x2 - x1, x0 - x2, x1 - x0];
                let f_c = (f.values[tri[0]] + f.values[tri[1]] + f.values[tri[2]]) / 3.0;
                for a in 0..3 {
                    let load = area * f_c / 3.0;
                    let mut stiff = 0.0;
                    for b in 0..3 {
                        stiff +=
                            zc * (bv[a] * bv[b] + cv[a] * cv[b]) / (4.0 * area) * u.values[tri[b]];
                    }
                    r[tri[a]] += load - stiff;
                }
            }
        }
    }
    mesh.interior_nodes().iter().map(|&i| r[i]).collect()
}

fn random_zuf(mesh: Mesh, seed: u64) -> (NodalField, NodalField, NodalField) {
    let mut rng = rng_for(seed, Stream::Eval, 3);
    let z = NodalField::new(
        mesh,
        (0..mesh.node_count())
            .map(|_| 0.5 + rng.gen::<f64>())
            .collect(),
    )
    .unwrap();
    let mut uv = vec![0.0; mesh.node_count()];
    for (i, v) in uv.iter_mut().enumerate() {
        if !mesh.is_boundary(i) {
            *v = rng.gen::<f64>() - 0.5;
        }
    }
    let u = NodalField::new(mesh, uv).unwrap();
    let f = NodalField::new(
        mesh,
        (0..mesh.node_count())
            .map(|_| 2.0 * rng.gen::<f64>() - 1.0)
            .collect(),
    )
    .unwrap();
    (z, u, f)
}

/// Sliced distance against a repeated point equals the Dirac form over the
/// dimension, within `rel_tol`, on `trials` random configurations.
pub fn check_dirac_slicing(
    trials: usize,
    n_dirs: usize,
    batch_size: usize,
    d: usize,
    rel_tol: f64,
    seed: u64,
) -> CheckResult {
    let mut worst = 0.0f64;
    for t in 0..trials {
        let mut rng = rng_for(seed, Stream::Eval, 10 + t as u64);
        let y: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let cloud: Vec<Vec<f64>> = (0..batch_size)
            .map(|_| (0..d).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect())
            .collect();
        let yb = EmpiricalBatch::from_rows(&vec![y.clone(); batch_size]).unwrap();
        let cb = EmpiricalBatch::from_rows(&cloud).unwrap();
        let gamma = 0.7;
        let sw = sw2sq(&yb, &cb, gamma, n_dirs, seed ^ (t as u64) << 8).unwrap();
        let dirac = w2sq_dirac(&y, &cb, gamma).unwrap() / d as f64;
        worst = worst.max((sw - dirac).abs() / dirac);
    }
    CheckResult::new(
        "dirac-slicing-identity",
        worst < rel_tol,
        format!("worst relative gap {worst:.4} over {trials} trials (tol {rel_tol})"),
    )
}

/// Monte Carlo variance of the sliced estimator decays like 1/n_dirs.
pub fn check_slicing_variance_decay(seed: u64) -> CheckResult {
    let d = 4;
    let m = 64;
    let mut rng = rng_for(seed, Stream::Eval, 20);
    let xb = EmpiricalBatch::from_rows(
        &(0..m)
            .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let yb = EmpiricalBatch::from_rows(
        &(0..m)
            .map(|_| (0..d).map(|_| rng.gen::<f64>() + 0.3).collect::<Vec<_>>())
            .collect::<Vec<_>>(),
    )
    .unwrap();
    let variance = |n_dirs: usize, block: u64| -> f64 {
        let reps = 80;
        let vals: Vec<f64> = (0..reps)
            .map(|r| sw2sq(&xb, &yb, 1.0, n_dirs, block + r as u64).unwrap())
            .collect();
        let mean = vals.iter().sum::<f64>() / reps as f64;
        vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (reps - 1) as f64
    };
    let v_small = variance(50, 1000);
    let v_large = variance(200, 2000);
    let ratio = v_small / v_large;
    CheckResult::new(
        "slicing-variance-decay",
        (2.0..8.0).contains(&ratio),
        format!("variance ratio at 4x directions: {ratio:.2} (expect ~4)"),
    )
}

/// Adding centred Gaussian noise of std `s` to every batch point shifts the
/// Dirac form by d·s²/γ², within three standard errors over `draws` draws.
pub fn check_convolution_shift(draws: usize, seed: u64) -> CheckResult {
    let d = 3;
    let m = 50;
    let s = 0.2;
    let gamma = 0.5;
    let mut rng = rng_for(seed, Stream::Eval, 30);
    let y: Vec<f64> = (0..d).map(|_| rng.gen::<f64>()).collect();
    let base: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..d).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect())
        .collect();
    let batch = EmpiricalBatch::from_rows(&base).unwrap();
    let i0 = w2sq_dirac(&y, &batch, gamma).unwrap();

    let mut deltas = Vec::with_capacity(draws);
    for _ in 0..draws {
        let noisy: Vec<Vec<f64>> = base
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| v + s * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let nb = EmpiricalBatch::from_rows(&noisy).unwrap();
        deltas.push(w2sq_dirac(&y, &nb, gamma).unwrap() - i0);
    }
    let nrep = deltas.len() as f64;
    let mean = deltas.iter().sum::<f64>() / nrep;
    let var = deltas.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (nrep - 1.0);
    let se = (var / nrep).sqrt();
    let expect = d as f64 * s * s / (gamma * gamma);
    let gap = (mean - expect).abs();
    CheckResult::new(
        "convolution-shift",
        gap <= 3.0 * se,
        format!("shift {mean:.5} vs d·s²/γ² = {expect:.5}, |gap| = {gap:.2e} <= 3·SE = {:.2e}", 3.0 * se),
    )
}

/// Sorted coupling equals the exhaustive minimum over permutation couplings
/// for every batch size up to `max_m`.
pub fn check_w2_exhaustive(max_m: usize, seed: u64) -> CheckResult {
    fn perms(v: Vec<usize>) -> Vec<Vec<usize>> {
        if v.len() <= 1 {
            return vec![v];
        }
        let mut out = Vec::new();
        for i in 0..v.len() {
            let mut rest = v.clone();
            let x = rest.remove(i);
            for mut p in perms(rest) {
                p.insert(0, x);
                out.push(p);
            }
        }
        out
    }
    let mut rng = rng_for(seed, Stream::Eval, 40);
    let mut worst = 0.0f64;
    for m in 1..=max_m {
        for _ in 0..20 {
            let xs: Vec<f64> = (0..m).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect();
            let ys: Vec<f64> = (0..m).map(|_| 4.0 * rng.gen::<f64>() - 2.0).collect();
            let fast = w2sq_1d(&xs, &ys).unwrap();
            let brute = perms((0..m).collect())
                .into_iter()
                .map(|p| {
                    xs.iter()
                        .zip(p.iter().map(|&i| ys[i]))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                        / m as f64
                })
                .fold(f64::INFINITY, f64::min);
            worst = worst.max((fast - brute).abs() / brute.max(1.0));
        }
    }
    CheckResult::new(
        "w2-exhaustive-couplings",
        worst <= 1e-13,
        format!("worst relative gap to permutation minimum {worst:.2e} for m <= {max_m}"),
    )
}

/// Empirical direction covariance matches I/d.
pub fn check_sphere_covariance(seed: u64) -> CheckResult {
    let d = 5;
    let ds = sample_sphere(d, 100_000, seed).unwrap();
    let mut worst = 0.0f64;
    for a in 0..d {
        for b in 0..d {
            let mut acc = 0.0;
            for t in 0..ds.n_dirs {
                let row = ds.row(t);
                acc += row[a] * row[b];
            }
            let want = if a == b { 1.0 / d as f64 } else { 0.0 };
            worst = worst.max((acc / ds.n_dirs as f64 - want).abs());
        }
    }
    CheckResult::new(
        "sphere-covariance",
        worst < 0.01,
        format!("max entrywise deviation from I/d: {worst:.4}"),
    )
}

/// 1D solve against the closed-form solution at the midpoint.
pub fn check_fem_1d_analytic() -> CheckResult {
    let mesh = Mesh::new_1d(257).unwrap();
    let f = NodalField::constant(mesh, 10.0);
    let u = match fem::solve_darcy(&NodalField::constant(mesh, 1.0), &f, 1e-10) {
        Ok(u) => u,
        Err(e) => return CheckResult::new("fem-1d-analytic", false, e.to_string()),
    };
    let gap = (u.values[128] - 1.25).abs();
    CheckResult::new(
        "fem-1d-analytic",
        gap < 1e-8,
        format!("|u(0.5) - 1.25| = {gap:.2e} at n = 257"),
    )
}

/// Shifted-array residual equals the dense assembly oracle on small meshes.
pub fn check_stencil_oracle(inputs: usize, seed: u64) -> CheckResult {
    let mut worst = 0.0f64;
    let meshes = [3usize, 5, 7, 9];
    let per_mesh = inputs.div_ceil(meshes.len());
    for (mi, n) in meshes.into_iter().enumerate() {
        let mesh = Mesh::new_2d(n).unwrap();
        for t in 0..per_mesh {
            let (z, u, f) = random_zuf(mesh, seed + (mi * per_mesh + t) as u64);
            let fast = fem::residual_2d(&z, &u, &f).unwrap();
            let slow = dense_residual_oracle(&z, &u, &f);
            for (a, b) in fast.iter().zip(&slow) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    CheckResult::new(
        "stencil-vs-dense-assembly",
        worst < 1e-12,
        format!("max |stencil - assembly| = {worst:.2e} over {inputs} random inputs"),
    )
}

/// Manufactured solution: L∞ error ratio between h and h/2 sits in [3, 5].
pub fn check_manufactured_convergence() -> CheckResult {
    let err = |n: usize| -> Result<f64> {
        let mesh = Mesh::new_2d(n)?;
        let z = NodalField::constant(mesh, 1.0);
        let exact = NodalField::from_fn(mesh, |x1, x2| (PI * x1).sin() * (PI * x2).sin());
        let f = NodalField::new(
            mesh,
            exact.values.iter().map(|&v| 2.0 * PI * PI * v).collect(),
        )?;
        let u = fem::solve_darcy(&z, &f, 1e-12)?;
        Ok(u.values
            .iter()
            .zip(&exact.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max))
    };
    match (err(17), err(33)) {
        (Ok(e1), Ok(e2)) => {
            let ratio = e1 / e2;
            CheckResult::new(
                "manufactured-convergence",
                (3.0..=5.0).contains(&ratio),
                format!("L∞ error {e1:.3e} (h=1/16) vs {e2:.3e} (h=1/32), ratio {ratio:.2}"),
            )
        }
        (Err(e), _) | (_, Err(e)) => {
            CheckResult::new("manufactured-convergence", false, e.to_string())
        }
    }
}

/// Inverse∘forward spectral transform with full modes is the identity.
pub fn check_spectral_roundtrip(seed: u64) -> CheckResult {
    let mut worst = 0.0f64;
    let mut rng = rng_for(seed, Stream::Eval, 50);
    for n in [8usize, 9, 12] {
        let plan = SpectralPlan::new(Dim::One, n, n / 2 + 1);
        let x = Tensor::new(vec![1, n], (0..n).map(|_| rng.gen::<f64>()).collect());
        let y = crate::tape::spectral_roundtrip(&plan, &x);
        for (a, b) in y.data().iter().zip(x.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    let n = 8;
    let plan = SpectralPlan::new(Dim::Two, n, n / 2 + 1);
    let x = Tensor::new(vec![1, n, n], (0..n * n).map(|_| rng.gen::<f64>()).collect());
    let y = crate::tape::spectral_roundtrip(&plan, &x);
    for (a, b) in y.data().iter().zip(x.data()) {
        worst = worst.max((a - b).abs());
    }
    CheckResult::new(
        "spectral-roundtrip",
        worst < 1e-12,
        format!("max reconstruction error with full modes {worst:.2e}"),
    )
}

/// Gradient checks for every tape primitive and the composed spectral block.
pub fn check_tape_gradients(seed: u64) -> CheckResult {
    let mut rng = rng_for(seed, Stream::Eval, 60);
    let mut rand_t = |shape: Vec<usize>| -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen::<f64>() - 0.5).collect())
    };
    let mut worst = 0.0f64;
    let mut track = |err: Result<f64>| match err {
        Ok(v) => worst = worst.max(v),
        Err(_) => worst = f64::INFINITY,
    };
    track(gradcheck(
        &[rand_t(vec![3, 4]), rand_t(vec![3, 4])],
        1e-4,
        |t, ids| {
            let s = t.add(ids[0], ids[1]);
            let h = t.hadamard(s, ids[0]);
            t.mean_sq(h)
        },
    ));
    track(gradcheck(
        &[rand_t(vec![4, 3]), rand_t(vec![3, 6]), rand_t(vec![4])],
        1e-4,
        |t, ids| {
            let c = t.channel_contract(ids[0], ids[1]);
            let b = t.bias_add(c, ids[2]);
            let s = t.silu(b);
            t.mean_sq(s)
        },
    ));
    let plan = SpectralPlan::new(Dim::One, 12, 4);
    let mask = Arc::new(rand_t(vec![12]));
    let w_shape = vec![plan.mode_slots(), 3, 3, 2];
    let p2 = plan.clone();
    track(gradcheck(
        &[rand_t(vec![3, 3]), rand_t(w_shape), rand_t(vec![3, 12])],
        1e-4,
        move |t, ids| {
            let lin = t.channel_contract(ids[0], ids[2]);
            let fwd = t.spectral_fwd(ids[2], p2.clone());
            let mul = t.mode_mul(ids[1], fwd);
            let inv = t.spectral_inv(mul, p2.clone());
            let sum = t.add(lin, inv);
            let act = t.silu(sum);
            let msk = t.mask_mul(act, mask.clone());
            t.mean_sq(msk)
        },
    ));
    CheckResult::new(
        "tape-gradcheck-primitives",
        worst < 1e-5,
        format!("max relative error vs central differences {worst:.2e}"),
    )
}

/// Gradient check of the full operator residual-loss graph.
pub fn check_residual_loss_gradient() -> CheckResult {
    let cfg = FnoConfig {
        dim: Dim::One,
        n: 17,
        layers: 2,
        channels: 4,
        modes: 4,
    };
    match nop::gradcheck_residual_loss(cfg, 2, 1e-4, 5) {
        Ok(err) => CheckResult::new(
            "residual-loss-gradcheck",
            err < 1e-4,
            format!("max relative error {err:.2e} on a 2-layer/4-channel/4-mode config"),
        ),
        Err(e) => CheckResult::new("residual-loss-gradcheck", false, e.to_string()),
    }
}

/// The full verification suite in a fixed order.
pub fn run_all(seed: u64) -> Vec<CheckResult> {
    vec![
        check_w2_exhaustive(6, seed),
        check_dirac_slicing(20, 10_000, 200, 5, 0.05, seed),
        check_convolution_shift(10_000, seed),
        check_slicing_variance_decay(seed),
        check_sphere_covariance(seed),
        check_fem_1d_analytic(),
        check_stencil_oracle(100, seed),
        check_manufactured_convergence(),
        check_spectral_roundtrip(seed),
        check_tape_gradients(seed),
        check_residual_loss_gradient(),
    ]
}
