//! Gaussian random fields by truncated Karhunen–Loève expansion and the
//! transport maps producing level-set and lognormal coefficient fields.
//!
//! The latent field is a cosine expansion orthogonal to constants,
//!
//! 1D: a(x) = Σ_{j≥1} s_j ε_j cos(jπx),
//! 2D: a(x) = Σ_{j,k≥1} s_{jk} ε_{jk} cos(jπx₁)cos(kπx₂),
//!
//! with per-mode standard deviations `s` given by [`levelset_stddev`] or
//! [`matern_stddev`] depending on the prior family. Mode indexing starts at
//! 1; the constant mode is excluded.

use crate::error::{Error, Result};
use crate::mesh::{Dim, Mesh};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Prior families over coefficient fields.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Family {
    #[serde(rename = "levelset-sharp")]
    LevelSetSharp,
    #[serde(rename = "levelset-smooth")]
    LevelSetSmooth,
    #[serde(rename = "lognormal")]
    Lognormal,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::LevelSetSharp => "levelset-sharp",
            Family::LevelSetSmooth => "levelset-smooth",
            Family::Lognormal => "lognormal",
        }
    }

    /// Number of calibrated parameters: (λ, κ⁻, κ⁺) or (ν, ℓ).
    pub fn alpha_dim(self) -> usize {
        match self {
            Family::LevelSetSharp | Family::LevelSetSmooth => 3,
            Family::Lognormal => 2,
        }
    }

    /// Component names of alpha, in storage order.
    pub fn alpha_names(self) -> &'static [&'static str] {
        match self {
            Family::LevelSetSharp | Family::LevelSetSmooth => &["lambda", "kappa_minus", "kappa_plus"],
            Family::Lognormal => &["nu", "ell"],
        }
    }
}

/// A prior family together with its calibrated parameters `alpha`, fixed
/// hyperparameters, and truncation orders.
///
/// `alpha` layout: level set `[λ, κ⁻, κ⁺]`, lognormal `[ν, ℓ]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub family: Family,
    pub alpha: Vec<f64>,
    /// Spectral decay exponent of the level-set latent field.
    pub beta: f64,
    /// Transition sharpness of the smoothed level-set map.
    pub tau: f64,
    /// Amplitude of the lognormal latent field.
    pub sigma: f64,
    /// Truncation order along the first mode index.
    pub modes_j: usize,
    /// Truncation order along the second mode index (ignored in 1D).
    pub modes_k: usize,
    pub dim: Dim,
}

impl PriorSpec {
    pub fn level_set(
        sharp: bool,
        lambda: f64,
        kappa_minus: f64,
        kappa_plus: f64,
        beta: f64,
        tau: f64,
        modes_j: usize,
        modes_k: usize,
        dim: Dim,
    ) -> Result<Self> {
        let spec = PriorSpec {
            family: if sharp {
                Family::LevelSetSharp
            } else {
                Family::LevelSetSmooth
            },
            alpha: vec![lambda, kappa_minus, kappa_plus],
            beta,
            tau,
            sigma: 0.0,
            modes_j,
            modes_k,
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn lognormal(
        nu: f64,
        ell: f64,
        sigma: f64,
        modes_j: usize,
        modes_k: usize,
        dim: Dim,
    ) -> Result<Self> {
        let spec = PriorSpec {
            family: Family::Lognormal,
            alpha: vec![nu, ell],
            beta: 0.0,
            tau: 0.0,
            sigma,
            modes_j,
            modes_k,
            dim,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha.len() != self.family.alpha_dim() {
            return Err(Error::invalid(format!(
                "{} expects {} alpha components, got {}",
                self.family.name(),
                self.family.alpha_dim(),
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
            return Err(Error::invalid(format!(
                "alpha components must be strictly positive and finite, got {:?}",
                self.alpha
            )));
        }
        if self.modes_j < 1 {
            return Err(Error::invalid("truncation order J must be >= 1"));
        }
        if self.dim == Dim::Two && self.modes_k < 1 {
            return Err(Error::invalid("truncation order K must be >= 1 in 2D"));
        }
        match self.family {
            Family::LevelSetSharp | Family::LevelSetSmooth => {
                let d = self.dim.as_usize() as f64;
                if !(self.beta > d / 2.0) {
                    return Err(Error::invalid(format!(
                        "spectral decay beta must exceed d/2 = {}, got {}",
                        d / 2.0,
                        self.beta
                    )));
                }
                if self.family == Family::LevelSetSmooth && !(self.tau > 0.0) {
                    return Err(Error::invalid("transition sharpness tau must be positive"));
                }
            }
            Family::Lognormal => {
                if !(self.sigma >= 0.0) {
                    return Err(Error::invalid("lognormal amplitude sigma must be >= 0"));
                }
            }
        }
        Ok(())
    }

    /// Same spec with a different alpha (used by the optimization loops).
    pub fn with_alpha(&self, alpha: &[f64]) -> Result<Self> {
        let mut spec = self.clone();
        spec.alpha = alpha.to_vec();
        spec.validate()?;
        Ok(spec)
    }

    /// Number of latent modes (J in 1D, J·K in 2D).
    pub fn latent_len(&self) -> usize {
        match self.dim {
            Dim::One => self.modes_j,
            Dim::Two => self.modes_j * self.modes_k,
        }
    }

    /// Per-mode standard deviations, j-major in 2D.
    pub fn spectrum(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.latent_len());
        match self.dim {
            Dim::One => {
                for j in 1..=self.modes_j {
                    out.push(self.mode_stddev(j, None)?);
                }
            }
            Dim::Two => {
                for j in 1..=self.modes_j {
                    for k in 1..=self.modes_k {
                        out.push(self.mode_stddev(j, Some(k))?);
                    }
                }
            }
        }
        Ok(out)
    }

    fn mode_stddev(&self, j: usize, k: Option<usize>) -> Result<f64> {
        match self.family {
            Family::LevelSetSharp | Family::LevelSetSmooth => {
                levelset_stddev(j, k, self.alpha[0], self.beta)
            }
            Family::Lognormal => matern_stddev(
                j,
                k,
                self.sigma,
                self.alpha[1],
                self.alpha[0],
                self.dim.as_usize(),
            ),
        }
    }
}

/// Values of a scalar function on the nodes of a structured mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    pub mesh: Mesh,
    pub values: Vec<f64>,
}

impl NodalField {
    pub fn new(mesh: Mesh, values: Vec<f64>) -> Result<Self> {
        if values.len() != mesh.node_count() {
            return Err(Error::shape(format!(
                "field has {} values for a mesh with {} nodes",
                values.len(),
                mesh.node_count()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("nodal values must be finite"));
        }
        Ok(NodalField { mesh, values })
    }

    pub fn constant(mesh: Mesh, value: f64) -> Self {
        NodalField {
            mesh,
            values: vec![value; mesh.node_count()],
        }
    }

    pub fn from_fn(mesh: Mesh, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..mesh.node_count())
            .map(|i| {
                let (x1, x2) = mesh.coords(i);
                f(x1, x2)
            })
            .collect();
        NodalField { mesh, values }
    }
}

/// An i.i.d. standard-normal latent draw matching a spec's truncation.
#[derive(Debug, Clone)]
pub struct LatentDraw {
    /// Row-major (j-major) latent coefficients, length J or J·K.
    pub eps: Vec<f64>,
    pub modes_j: usize,
    pub modes_k: usize,
    pub seed: u64,
}

/// Per-mode standard deviation of the level-set latent field:
/// (j²π² + λ²)^(−β/2) in 1D, ((j²+k²)π² + λ²)^(−β/2) in 2D.
///
/// Negative λ or β are rejected; zero is admitted so the function is defined
/// on the closure of the parameter domain (λ = β = 0 gives 1).
pub fn levelset_stddev(j: usize, k: Option<usize>, lambda: f64, beta: f64) -> Result<f64> {
    if j < 1 || k.is_some_and(|k| k < 1) {
        return Err(Error::invalid("mode indices start at 1"));
    }
    if !(lambda >= 0.0) || !(beta >= 0.0) {
        return Err(Error::invalid(format!(
            "levelset spectrum needs lambda >= 0 and beta >= 0, got lambda={lambda}, beta={beta}"
        )));
    }
    let sq = (j * j + k.map_or(0, |k| k * k)) as f64;
    Ok((sq * PI * PI + lambda * lambda).powf(-beta / 2.0))
}

/// Per-mode standard deviation of the Matérn-like lognormal latent field:
/// sqrt(γ ℓ^d (ℓ²(j²+k²)π² + 1)^(−ν−d/2)) with
/// γ = σ² 2^d π^(d/2) Γ(ν+d/2)/Γ(ν).
pub fn matern_stddev(
    j: usize,
    k: Option<usize>,
    sigma: f64,
    ell: f64,
    nu: f64,
    dim: usize,
) -> Result<f64> {
    if j < 1 || k.is_some_and(|k| k < 1) {
        return Err(Error::invalid("mode indices start at 1"));
    }
    if !(ell > 0.0) || !(nu > 0.0) {
        return Err(Error::invalid(format!(
            "matern spectrum needs ell > 0 and nu > 0, got ell={ell}, nu={nu}"
        )));
    }
    if !(sigma >= 0.0) {
        return Err(Error::invalid("matern amplitude sigma must be >= 0"));
    }
    let d = dim as f64;
    let gamma_const = matern_gamma(sigma, nu, dim);
    let sq = (j * j + k.map_or(0, |k| k * k)) as f64;
    let term = gamma_const * ell.powf(d) * (ell * ell * sq * PI * PI + 1.0).powf(-nu - d / 2.0);
    Ok(term.sqrt())
}

/// Normalizing constant γ = σ² 2^d π^(d/2) Γ(ν+d/2)/Γ(ν).
pub fn matern_gamma(sigma: f64, nu: f64, dim: usize) -> f64 {
    let d = dim as f64;
    sigma * sigma * 2f64.powf(d) * PI.powf(d / 2.0) * gamma(nu + d / 2.0) / gamma(nu)
}

/// Gamma function by the Lanczos approximation (g = 7, 9 coefficients),
/// accurate to better than 10 significant digits on (0, 30).
pub fn gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_93,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_13,
        -176.615_029_162_140_59,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_571_6e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection formula
        PI / ((PI * x).sin() * gamma(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut acc = COEF[0];
        for (i, &c) in COEF.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + G + 0.5;
        (2.0 * PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * acc
    }
}

/// Draw the latent coefficients for one sample, deterministic per seed.
pub fn sample_latent(seed: u64, spec: &PriorSpec) -> Result<LatentDraw> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = spec.latent_len();
    let eps: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    Ok(LatentDraw {
        eps,
        modes_j: spec.modes_j,
        modes_k: if spec.dim == Dim::Two { spec.modes_k } else { 1 },
        seed,
    })
}

/// Cosine basis values precomputed per (truncation, mesh) and reused across
/// all samples of an iteration; synthesis dominates per-sample cost otherwise.
#[derive(Debug, Clone)]
pub struct SynthesisTable {
    mesh: Mesh,
    modes_j: usize,
    modes_k: usize,
    /// cos(jπ x₁) per mode j and grid column, row-major (J × n).
    cos_x1: Vec<f64>,
    /// cos(kπ x₂) per mode k and grid row, row-major (K × n); empty in 1D.
    cos_x2: Vec<f64>,
}

impl SynthesisTable {
    pub fn new(spec: &PriorSpec, mesh: Mesh) -> Result<Self> {
        if spec.dim != mesh.dim {
            return Err(Error::shape(format!(
                "spec dimension {:?} does not match mesh dimension {:?}",
                spec.dim, mesh.dim
            )));
        }
        let n = mesh.n;
        let h = mesh.h();
        let table_for = |modes: usize| {
            let mut t = Vec::with_capacity(modes * n);
            for m in 1..=modes {
                for i in 0..n {
                    t.push((m as f64 * PI * i as f64 * h).cos());
                }
            }
            t
        };
        Ok(SynthesisTable {
            mesh,
            modes_j: spec.modes_j,
            modes_k: if spec.dim == Dim::Two { spec.modes_k } else { 0 },
            cos_x1: table_for(spec.modes_j),
            cos_x2: match spec.dim {
                Dim::One => Vec::new(),
                Dim::Two => table_for(spec.modes_k),
            },
        })
    }

    pub fn mesh(&self) -> Mesh {
        self.mesh
    }

    fn matches(&self, spec: &PriorSpec) -> bool {
        self.modes_j == spec.modes_j
            && (spec.dim == Dim::One || self.modes_k == spec.modes_k)
            && self.mesh.dim == spec.dim
    }
}

/// Evaluate a(x) = Σ s·ε·basis at every node of the table's mesh.
pub fn synthesize_grf(
    draw: &LatentDraw,
    spec: &PriorSpec,
    table: &SynthesisTable,
) -> Result<NodalField> {
    if !table.matches(spec) {
        return Err(Error::shape(
            "synthesis table was built for a different truncation or mesh",
        ));
    }
    if draw.eps.len() != spec.latent_len() {
        return Err(Error::shape(format!(
            "latent draw has {} entries, spec expects {}",
            draw.eps.len(),
            spec.latent_len()
        )));
    }
    let std = spec.spectrum()?;
    let n = table.mesh.n;
    let mut values = vec![0.0; table.mesh.node_count()];
    match spec.dim {
        Dim::One => {
            for j in 0..spec.modes_j {
                let w = std[j] * draw.eps[j];
                let row = &table.cos_x1[j * n..(j + 1) * n];
                for (v, c) in values.iter_mut().zip(row) {
                    *v += w * c;
                }
            }
        }
        Dim::Two => {
            let jm = spec.modes_j;
            let km = spec.modes_k;
            // weighted coefficients w[j][k] = s·ε
            let w: Vec<f64> = (0..jm * km).map(|i| std[i] * draw.eps[i]).collect();
            let mut t = vec![0.0; jm];
            for r in 0..n {
                // contract the k (x₂) axis at this row
                for (j, tj) in t.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for k in 0..km {
                        acc += w[j * km + k] * table.cos_x2[k * n + r];
                    }
                    *tj = acc;
                }
                let row_out = &mut values[r * n..(r + 1) * n];
                for (j, &tj) in t.iter().enumerate() {
                    let basis_row = &table.cos_x1[j * n..(j + 1) * n];
                    for (v, c) in row_out.iter_mut().zip(basis_row) {
                        *v += tj * c;
                    }
                }
            }
        }
    }
    NodalField::new(table.mesh, values)
}

/// Trapezoidal-quadrature approximation of the L²(D) norm of a nodal field.
pub fn l2_norm(field: &NodalField) -> f64 {
    let mut acc = 0.0;
    for (i, &v) in field.values.iter().enumerate() {
        acc += field.mesh.quad_weight(i) * v * v;
    }
    acc.sqrt()
}

/// Sharp level-set map: z = κ⁻ on {a < 0}, κ⁺ on {a ≥ 0}.
pub fn levelset_sharp(a: &NodalField, kappa_minus: f64, kappa_plus: f64) -> Result<NodalField> {
    if !(kappa_minus > 0.0) || !(kappa_plus > 0.0) {
        return Err(Error::invalid("kappa values must be strictly positive"));
    }
    let values = a
        .values
        .iter()
        .map(|&v| if v < 0.0 { kappa_minus } else { kappa_plus })
        .collect();
    NodalField::new(a.mesh, values)
}

/// Smoothed level-set map on the normalized field ā = a/‖a‖:
/// z̃ = ½ tanh(τā)(κ⁺−κ⁻) + ½(κ⁺−κ⁻) + κ⁻.
///
/// If ‖a‖ < 1e−12 the normalized field is taken as identically zero.
pub fn levelset_smooth(
    a: &NodalField,
    kappa_minus: f64,
    kappa_plus: f64,
    tau: f64,
) -> Result<NodalField> {
    if !(kappa_minus > 0.0) || !(kappa_plus > 0.0) {
        return Err(Error::invalid("kappa values must be strictly positive"));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid("tau must be strictly positive"));
    }
    let norm = l2_norm(a);
    let inv = if norm < 1e-12 { 0.0 } else { 1.0 / norm };
    let half_gap = 0.5 * (kappa_plus - kappa_minus);
    let values = a
        .values
        .iter()
        .map(|&v| half_gap * (tau * v * inv).tanh() + half_gap + kappa_minus)
        .collect();
    NodalField::new(a.mesh, values)
}

/// Lognormal map: z = exp(a) pointwise.
pub fn lognormal_map(a: &NodalField) -> NodalField {
    NodalField {
        mesh: a.mesh,
        values: a.values.iter().map(|&v| v.exp()).collect(),
    }
}

/// One coefficient-field sample: latent draw → synthesis → family map.
/// Pure function of (spec, seed, mesh).
pub fn push_sample(spec: &PriorSpec, seed: u64, mesh: Mesh) -> Result<NodalField> {
    let table = SynthesisTable::new(spec, mesh)?;
    push_sample_with_table(spec, seed, &table)
}

/// As [`push_sample`] with a precomputed synthesis table (the hot path).
pub fn push_sample_with_table(
    spec: &PriorSpec,
    seed: u64,
    table: &SynthesisTable,
) -> Result<NodalField> {
    let draw = sample_latent(seed, spec)?;
    push_draw_with_table(spec, &draw, table)
}

/// Map an explicit latent draw through synthesis and the family map.
pub fn push_draw_with_table(
    spec: &PriorSpec,
    draw: &LatentDraw,
    table: &SynthesisTable,
) -> Result<NodalField> {
    let a = synthesize_grf(draw, spec, table)?;
    match spec.family {
        Family::LevelSetSharp => levelset_sharp(&a, spec.alpha[1], spec.alpha[2]),
        Family::LevelSetSmooth => levelset_smooth(&a, spec.alpha[1], spec.alpha[2], spec.tau),
        Family::Lognormal => Ok(lognormal_map(&a)),
    }
}
