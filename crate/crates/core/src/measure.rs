//! Divergences between empirical measures: exact 1D Wasserstein-2, the
//! weighted Dirac form, and the Monte Carlo weighted sliced-Wasserstein
//! distance.
//!
//! The slicing integral is taken against the normalized uniform probability
//! measure on the sphere (a Monte Carlo mean over directions), consistent
//! with ∫θθᵀdθ = I/d; the weighted projection of a point x onto direction θ
//! is ⟨x/γ, θ⟩ for noise covariance Γ = γ²I.

use crate::error::{Error, Result};
use crate::seeds::{rng_for, Stream};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

/// m points in ℝ^d, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalBatch {
    pub m: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl EmpiricalBatch {
    pub fn new(m: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if m < 1 || d < 1 || data.len() != m * d {
            return Err(Error::shape(format!(
                "batch of {m}×{d} needs {} entries, got {}",
                m * d,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("batch entries must be finite"));
        }
        Ok(EmpiricalBatch { m, d, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::shape("batch needs at least one row"));
        }
        let d = rows[0].len();
        let mut data = Vec::with_capacity(rows.len() * d);
        for r in rows {
            if r.len() != d {
                return Err(Error::shape("ragged batch rows"));
            }
            data.extend_from_slice(r);
        }
        EmpiricalBatch::new(rows.len(), d, data)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Unit direction vectors on 𝕊^{d−1}, row-major.
#[derive(Debug, Clone)]
pub struct DirectionSet {
    pub n_dirs: usize,
    pub d: usize,
    pub dirs: Vec<f64>,
    pub seed: u64,
}

impl DirectionSet {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.dirs[i * self.d..(i + 1) * self.d]
    }
}

/// i.i.d. uniform directions on the sphere (normalized standard Gaussians),
/// deterministic per seed.
pub fn sample_sphere(d: usize, n_dirs: usize, seed: u64) -> Result<DirectionSet> {
    if d < 1 || n_dirs < 1 {
        return Err(Error::invalid("need d >= 1 and n_dirs >= 1"));
    }
    let mut rng = rng_for(seed, Stream::Directions, 0);
    let mut dirs = Vec::with_capacity(n_dirs * d);
    for _ in 0..n_dirs {
        loop {
            let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                dirs.extend(v.iter().map(|x| x / norm));
                break;
            }
        }
    }
    Ok(DirectionSet {
        n_dirs,
        d,
        dirs,
        seed,
    })
}

/// Squared Wasserstein-2 distance between two equal-size 1D empirical
/// measures: sort both and average the squared gaps of the monotone coupling.
pub fn w2sq_1d(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.is_empty() {
        return Err(Error::shape(format!(
            "equal nonzero sample counts required, got {} and {}",
            xs.len(),
            ys.len()
        )));
    }
    let mut a = xs.to_vec();
    let mut b = ys.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let m = a.len() as f64;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / m)
}

/// Γ-weighted squared Wasserstein-2 distance between δ_y and an empirical
/// measure: the batch mean of ‖y − x‖²/γ².
pub fn w2sq_dirac(y: &[f64], batch: &EmpiricalBatch, gamma_std: f64) -> Result<f64> {
    if y.len() != batch.d {
        return Err(Error::shape("point and batch dimensions differ"));
    }
    if !(gamma_std > 0.0) {
        return Err(Error::invalid("gamma_std must be positive"));
    }
    let inv_g2 = 1.0 / (gamma_std * gamma_std);
    let mut acc = 0.0;
    for i in 0..batch.m {
        let row = batch.row(i);
        let mut sq = 0.0;
        for (a, b) in y.iter().zip(row) {
            sq += (a - b) * (a - b);
        }
        acc += sq;
    }
    Ok(acc / batch.m as f64 * inv_g2)
}

/// Monte Carlo weighted sliced squared Wasserstein-2 distance with fresh
/// directions drawn from the seed.
pub fn sw2sq(
    x_batch: &EmpiricalBatch,
    y_batch: &EmpiricalBatch,
    gamma_std: f64,
    n_dirs: usize,
    seed: u64,
) -> Result<f64> {
    let dirs = sample_sphere(x_batch.d, n_dirs, seed)?;
    sw2sq_with_dirs(x_batch, y_batch, gamma_std, &dirs)
}

/// As [`sw2sq`] with an explicit direction set (frozen across the probes of
/// one optimization iteration).
pub fn sw2sq_with_dirs(
    x_batch: &EmpiricalBatch,
    y_batch: &EmpiricalBatch,
    gamma_std: f64,
    dirs: &DirectionSet,
) -> Result<f64> {
    if x_batch.d != y_batch.d || x_batch.d != dirs.d {
        return Err(Error::shape("batch and direction dimensions differ"));
    }
    if x_batch.m != y_batch.m {
        return Err(Error::shape(format!(
            "equal sample counts required, got {} and {}",
            x_batch.m, y_batch.m
        )));
    }
    if !(gamma_std > 0.0) {
        return Err(Error::invalid("gamma_std must be positive"));
    }
    let inv_g = 1.0 / gamma_std;
    let per_dir: Vec<f64> = (0..dirs.n_dirs)
        .into_par_iter()
        .map(|t| {
            let theta = dirs.row(t);
            let m = x_batch.m;
            let mut px = Vec::with_capacity(m);
            let mut py = Vec::with_capacity(m);
            for i in 0..m {
                px.push(dot(x_batch.row(i), theta) * inv_g);
                py.push(dot(y_batch.row(i), theta) * inv_g);
            }
            px.sort_by(f64::total_cmp);
            py.sort_by(f64::total_cmp);
            px.iter()
                .zip(&py)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / m as f64
        })
        .collect();
    // ordered sequential reduction keeps results independent of scheduling
    Ok(per_dir.iter().sum::<f64>() / dirs.n_dirs as f64)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn sphere_rows_are_unit() {
        let ds = sample_sphere(5, 200, 3).unwrap();
        for i in 0..ds.n_dirs {
            let norm: f64 = ds.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sphere_1d_is_signs() {
        let ds = sample_sphere(1, 100, 9).unwrap();
        assert!(ds.dirs.iter().all(|&v| v == 1.0 || v == -1.0));
    }

    #[test]
    fn sphere_covariance_is_identity_over_d() {
        let d = 3;
        let ds = sample_sphere(d, 100_000, 17).unwrap();
        let mut cov = vec![0.0; d * d];
        for t in 0..ds.n_dirs {
            let row = ds.row(t);
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += row[a] * row[b];
                }
            }
        }
        for a in 0..d {
            for b in 0..d {
                let want = if a == b { 1.0 / d as f64 } else { 0.0 };
                let got = cov[a * d + b] / ds.n_dirs as f64;
                assert!((got - want).abs() < 0.01, "cov[{a}{b}] = {got}");
            }
        }
    }

    #[test]
    fn w2sq_1d_examples() {
        assert_eq!(w2sq_1d(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(w2sq_1d(&[0.0], &[3.0]).unwrap(), 9.0);
        // brute force over both couplings of {0,2} vs {1,3}: min(1, 5) = 1
        assert_eq!(w2sq_1d(&[0.0, 2.0], &[1.0, 3.0]).unwrap(), 1.0);
        assert!(w2sq_1d(&[0.0, 2.0], &[1.0]).is_err());
        assert!(w2sq_1d(&[], &[]).is_err());
    }

    fn brute_force_w2sq(xs: &[f64], ys: &[f64]) -> f64 {
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
        let idx: Vec<usize> = (0..ys.len()).collect();
        perms(idx)
            .into_iter()
            .map(|p| {
                xs.iter()
                    .zip(p.iter().map(|&i| ys[i]))
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    / xs.len() as f64
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn w2sq_1d_matches_exhaustive_permutations() {
        let mut rng = crate::seeds::rng_for(5, crate::seeds::Stream::Eval, 0);
        for m in 1..=6 {
            for _ in 0..20 {
                let xs: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
                let ys: Vec<f64> = (0..m).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
                let fast = w2sq_1d(&xs, &ys).unwrap();
                let slow = brute_force_w2sq(&xs, &ys);
                assert!(
                    (fast - slow).abs() <= 1e-13 * slow.max(1.0),
                    "sorted {fast} vs permutations {slow}"
                );
            }
        }
        // ties
        let xs = [1.0, 1.0, 0.0];
        let ys = [0.5, 1.0, 1.0];
        assert!(
            (w2sq_1d(&xs, &ys).unwrap() - brute_force_w2sq(&xs, &ys)).abs() < 1e-15
        );
    }

    #[test]
    fn w2sq_dirac_examples() {
        let b = EmpiricalBatch::from_rows(&[vec![0.5, -1.0]]).unwrap();
        assert_eq!(w2sq_dirac(&[0.5, -1.0], &b, 1.0).unwrap(), 0.0);
        let b = EmpiricalBatch::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(w2sq_dirac(&[0.0, 0.0], &b, 1.0).unwrap(), 1.0);
        let b = EmpiricalBatch::from_rows(&[vec![0.0, 0.0]]).unwrap();
        assert_relative_eq!(
            w2sq_dirac(&[0.02, 0.0], &b, 0.01).unwrap(),
            4.0,
            max_relative = 1e-12
        );
    }

    #[test]
    fn sw2sq_identical_batches_vanish() {
        let b = EmpiricalBatch::from_rows(&[vec![1.0, 2.0], vec![-0.5, 0.25]]).unwrap();
        assert_eq!(sw2sq(&b, &b, 0.3, 64, 4).unwrap(), 0.0);
    }

    #[test]
    fn sw2sq_1d_equals_w2sq() {
        let xs = vec![0.0, 2.0, -1.0, 0.7];
        let ys = vec![1.0, 3.0, 0.2, -0.4];
        let xb = EmpiricalBatch::new(4, 1, xs.clone()).unwrap();
        let yb = EmpiricalBatch::new(4, 1, ys.clone()).unwrap();
        let sw = sw2sq(&xb, &yb, 1.0, 33, 8).unwrap();
        // identical up to summation order under the sign flip
        assert_relative_eq!(sw, w2sq_1d(&xs, &ys).unwrap(), max_relative = 1e-14);
    }

    #[test]
    fn dirac_slicing_identity() {
        // repeated-point batch against a cloud: sliced distance is the
        // weighted Dirac distance divided by the dimension
        let d = 5;
        let m = 200;
        let mut rng = crate::seeds::rng_for(11, crate::seeds::Stream::Eval, 1);
        let y: Vec<f64> = (0..d).map(|_| rng.gen::<f64>() - 0.5).collect();
        let cloud: Vec<Vec<f64>> = (0..m)
            .map(|_| (0..d).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect())
            .collect();
        let yb = EmpiricalBatch::from_rows(&vec![y.clone(); m]).unwrap();
        let cb = EmpiricalBatch::from_rows(&cloud).unwrap();
        let gamma = 0.7;
        let sw = sw2sq(&yb, &cb, gamma, 10_000, 23).unwrap();
        let dirac = w2sq_dirac(&y, &cb, gamma).unwrap() / d as f64;
        assert!(
            (sw - dirac).abs() / dirac < 0.05,
            "sliced {sw} vs dirac/d {dirac}"
        );
    }

    #[test]
    fn pushforward_identity_1d() {
        let xs = vec![0.25, -1.5, 3.0];
        let ys = vec![1.0, 0.5, -2.0];
        // γ = 0.5 rescales exactly in floating point
        let g = 0.5;
        let sx: Vec<f64> = xs.iter().map(|v| v / g).collect();
        let sy: Vec<f64> = ys.iter().map(|v| v / g).collect();
        assert_eq!(
            w2sq_1d(&sx, &sy).unwrap(),
            w2sq_1d(&xs, &ys).unwrap() / (g * g)
        );
        let g = 0.3;
        let sx: Vec<f64> = xs.iter().map(|v| v / g).collect();
        let sy: Vec<f64> = ys.iter().map(|v| v / g).collect();
        assert_relative_eq!(
            w2sq_1d(&sx, &sy).unwrap(),
            w2sq_1d(&xs, &ys).unwrap() / (g * g),
            max_relative = 1e-12
        );
    }

    proptest! {
        #[test]
        fn w2sq_metric_axioms(
            xs in proptest::collection::vec(-100.0f64..100.0, 1..20),
            shift in -10.0f64..10.0,
        ) {
            let ys: Vec<f64> = xs.iter().map(|v| v + shift).collect();
            let ab = w2sq_1d(&xs, &ys).unwrap();
            let ba = w2sq_1d(&ys, &xs).unwrap();
            prop_assert_eq!(ab, ba);
            prop_assert!(ab >= 0.0);
            // monotone coupling of a common shift costs exactly shift²
            prop_assert!((ab - shift * shift).abs() <= 1e-9 * (1.0 + shift * shift));
        }

        #[test]
        fn w2sq_zero_iff_same_sorted(
            xs in proptest::collection::vec(-50.0f64..50.0, 1..12),
            seed in 0u64..1000,
        ) {
            let mut shuffled = xs.clone();
            // deterministic shuffle
            let mut rng = crate::seeds::rng_for(seed, crate::seeds::Stream::Eval, 2);
            for i in (1..shuffled.len()).rev() {
                let j = rng.gen_range(0..=i);
                shuffled.swap(i, j);
            }
            prop_assert_eq!(w2sq_1d(&xs, &shuffled).unwrap(), 0.0);
        }
    }
}
