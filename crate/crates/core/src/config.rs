//! Config-driven experiment setup.
//!
//! Configs are TOML documents with a fixed schema; unknown keys are a hard
//! error. A config may name a `preset`, which fills every field the file
//! does not set itself. Presets ship for the level-set and lognormal Darcy
//! experiments at both full scale and desk scale.

use crate::calib::{LossConfig, OptimizerConfig, RegularizerConfig};
use crate::error::{Error, Result};
use crate::fem::SolveOptions;
use crate::mesh::{Dim, Mesh};
use crate::randfield::{Family, PriorSpec};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "gen-data")]
    GenData,
    #[serde(rename = "calibrate")]
    Calibrate,
    #[serde(rename = "calibrate-joint")]
    CalibrateJoint,
    #[serde(rename = "verify")]
    Verify,
    #[serde(rename = "bayes-check")]
    BayesCheck,
    #[serde(rename = "fem-convergence")]
    FemConvergence,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::GenData => "gen-data",
            Mode::Calibrate => "calibrate",
            Mode::CalibrateJoint => "calibrate-joint",
            Mode::Verify => "verify",
            Mode::BayesCheck => "bayes-check",
            Mode::FemConvergence => "fem-convergence",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gen-data" => Ok(Mode::GenData),
            "calibrate" => Ok(Mode::Calibrate),
            "calibrate-joint" => Ok(Mode::CalibrateJoint),
            "verify" => Ok(Mode::Verify),
            "bayes-check" => Ok(Mode::BayesCheck),
            "fem-convergence" => Ok(Mode::FemConvergence),
            other => Err(Error::config(format!("unknown mode '{other}'"))),
        }
    }
}

// ------------------------------------------------------------- raw schema

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    mode: Option<Mode>,
    preset: Option<String>,
    master_seed: Option<u64>,
    out_dir: Option<String>,
    threads: Option<usize>,
    dataset: Option<String>,
    reference_rel_errors_pct: Option<Vec<f64>>,
    reference_surrogate_pct: Option<f64>,
    prior: Option<RawPrior>,
    mesh: Option<RawMesh>,
    data: Option<RawData>,
    loss: Option<RawLoss>,
    optimizer: Option<RawOptimizer>,
    operator: Option<RawOperator>,
    solver: Option<RawSolver>,
    bayes: Option<RawBayes>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPrior {
    family: Option<Family>,
    lambda: Option<f64>,
    kappa_minus: Option<f64>,
    kappa_plus: Option<f64>,
    nu: Option<f64>,
    ell: Option<f64>,
    sigma: Option<f64>,
    beta: Option<f64>,
    tau: Option<f64>,
    modes: Option<usize>,
    modes_k: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawMesh {
    dim: Option<usize>,
    n: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawData {
    n_systems: Option<usize>,
    d_y: Option<usize>,
    gamma_std: Option<f64>,
    f_const: Option<f64>,
    /// Family the data is generated from when it differs from the model
    /// prior (e.g. sharp data fitted with the smoothed model).
    true_family: Option<Family>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLoss {
    n_s: Option<usize>,
    n_r: Option<usize>,
    n_dirs: Option<usize>,
    fd_delta: Option<f64>,
    regularizer: Option<RawRegularizer>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRegularizer {
    enabled: Option<bool>,
    m_h: Option<Vec<f64>>,
    sigma_h: Option<f64>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOptimizer {
    lr: Option<f64>,
    halvings: Option<usize>,
    iters: Option<usize>,
    amsgrad: Option<bool>,
    alpha0: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawOperator {
    layers: Option<usize>,
    channels: Option<usize>,
    modes: Option<usize>,
    inner_steps: Option<usize>,
    lr_phi: Option<f64>,
    amsgrad_phi: Option<bool>,
    fixed_pool: Option<bool>,
    warm_start: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSolver {
    tol: Option<f64>,
    max_iters: Option<usize>,
    jacobi: Option<bool>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawBayes {
    y: Option<f64>,
    gamma_std: Option<f64>,
    n_samples: Option<usize>,
    steps: Option<usize>,
}

// ---------------------------------------------------------- resolved config

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DataGenConfig {
    pub n_systems: usize,
    pub d_y: usize,
    pub gamma_std: f64,
    pub f_const: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OperatorSettings {
    pub layers: usize,
    pub channels: usize,
    pub modes: usize,
    pub inner_steps: usize,
    pub lr_phi: f64,
    pub amsgrad_phi: bool,
    pub fixed_pool: bool,
    pub warm_start: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolverSettings {
    pub tol: f64,
    pub max_iters: Option<usize>,
    pub jacobi: bool,
}

impl SolverSettings {
    pub fn to_options(self) -> SolveOptions {
        SolveOptions {
            tol: self.tol,
            max_iters: self.max_iters,
            jacobi: self.jacobi,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BayesSettings {
    pub y: f64,
    pub gamma_std: f64,
    pub n_samples: usize,
    pub steps: usize,
}

/// Fully resolved and validated experiment configuration.
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentConfig {
    pub mode: Option<Mode>,
    pub preset: Option<String>,
    pub master_seed: u64,
    pub out_dir: PathBuf,
    pub threads: usize,
    pub dataset_path: Option<PathBuf>,
    /// Model prior: the family being calibrated, its fixed hyperparameters
    /// and truncation; `alpha` holds the generating values used by gen-data.
    pub prior: PriorSpec,
    /// Family the synthetic data is drawn from (defaults to the model's).
    pub data_family: Family,
    pub mesh: Mesh,
    pub data: DataGenConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    pub operator: OperatorSettings,
    pub solver: SolverSettings,
    pub bayes: BayesSettings,
    pub reference_rel_errors_pct: Option<Vec<f64>>,
    pub reference_surrogate_pct: Option<f64>,
}

impl ExperimentConfig {
    /// Dataset path for read modes, defaulting to out_dir/dataset.json.
    pub fn dataset_path_resolved(&self) -> PathBuf {
        self.dataset_path
            .clone()
            .unwrap_or_else(|| self.out_dir.join("dataset.json"))
    }

    /// Prior the synthetic data generator draws from.
    pub fn true_spec(&self) -> Result<PriorSpec> {
        let mut spec = self.prior.clone();
        spec.family = self.data_family;
        spec.validate()?;
        Ok(spec)
    }
}

fn resolve(raw: RawConfig) -> Result<ExperimentConfig> {
    let mesh_raw = raw.mesh.unwrap_or_default();
    let dim = Dim::from_usize(mesh_raw.dim.unwrap_or(1))?;
    let mesh = Mesh::new(dim, mesh_raw.n.unwrap_or(65))?;

    let p = raw.prior.unwrap_or_default();
    let family = p.family.unwrap_or(Family::LevelSetSmooth);
    let modes = p.modes.unwrap_or(20);
    let modes_k = p.modes_k.unwrap_or(modes);
    let prior = match family {
        Family::LevelSetSharp | Family::LevelSetSmooth => PriorSpec::level_set(
            family == Family::LevelSetSharp,
            p.lambda.unwrap_or(8.0),
            p.kappa_minus.unwrap_or(1.0),
            p.kappa_plus.unwrap_or(2.0),
            p.beta.unwrap_or(4.0),
            p.tau.unwrap_or(10.0),
            modes,
            modes_k,
            dim,
        )?,
        Family::Lognormal => PriorSpec::lognormal(
            p.nu.unwrap_or(1.5),
            p.ell.unwrap_or(0.5),
            p.sigma.unwrap_or(1.0),
            modes,
            modes_k,
            dim,
        )?,
    };

    let d = raw.data.unwrap_or_default();
    let data = DataGenConfig {
        n_systems: d.n_systems.unwrap_or(200),
        d_y: d.d_y.unwrap_or(50),
        gamma_std: d.gamma_std.unwrap_or(0.01),
        f_const: d.f_const.unwrap_or(10.0),
    };
    if data.n_systems < 1 || data.d_y < 1 {
        return Err(Error::config("data needs n_systems >= 1 and d_y >= 1"));
    }
    if !(data.gamma_std >= 0.0) {
        return Err(Error::config("gamma_std must be >= 0"));
    }
    let data_family = d.true_family.unwrap_or(prior.family);

    let l = raw.loss.unwrap_or_default();
    let r = l.regularizer.unwrap_or_default();
    let regularizer = RegularizerConfig {
        enabled: r.enabled.unwrap_or(false),
        m_h: r.m_h.unwrap_or_default(),
        sigma_h: r.sigma_h.unwrap_or(2.0),
    };
    if regularizer.enabled && regularizer.m_h.len() != prior.alpha.len() {
        return Err(Error::config(format!(
            "regularizer m_h needs {} components for {}",
            prior.alpha.len(),
            prior.family.name()
        )));
    }
    let loss = LossConfig {
        n_s: l.n_s.unwrap_or(200),
        n_r: l.n_r.unwrap_or(20),
        n_dirs: l.n_dirs.unwrap_or(1000),
        d_y: data.d_y,
        regularizer,
        fd_delta: l.fd_delta.unwrap_or(1e-3),
    };
    loss.validate().map_err(|e| Error::config(e.to_string()))?;

    let o = raw.optimizer.unwrap_or_default();
    let optimizer = OptimizerConfig {
        lr: o.lr.unwrap_or(1e-2),
        halvings: o.halvings.unwrap_or(4),
        iters: o.iters.unwrap_or(600),
        amsgrad: o.amsgrad.unwrap_or(false),
        alpha0: o.alpha0,
    };
    if !(optimizer.lr > 0.0) || optimizer.iters < 1 {
        return Err(Error::config("optimizer needs lr > 0 and iters >= 1"));
    }
    if let Some(a0) = &optimizer.alpha0 {
        prior
            .with_alpha(a0)
            .map_err(|e| Error::config(format!("alpha0: {e}")))?;
    }

    let op = raw.operator.unwrap_or_default();
    let operator = OperatorSettings {
        layers: op.layers.unwrap_or(2),
        channels: op.channels.unwrap_or(16),
        modes: op.modes.unwrap_or(8),
        inner_steps: op.inner_steps.unwrap_or(10),
        lr_phi: op.lr_phi.unwrap_or(1e-3),
        amsgrad_phi: op.amsgrad_phi.unwrap_or(false),
        fixed_pool: op.fixed_pool.unwrap_or(false),
        warm_start: op.warm_start.unwrap_or(true),
    };
    if operator.layers < 1 || operator.channels < 1 || operator.modes < 1 {
        return Err(Error::config("operator needs layers, channels, modes >= 1"));
    }
    if !(operator.lr_phi > 0.0) {
        return Err(Error::config("operator lr_phi must be positive"));
    }

    let s = raw.solver.unwrap_or_default();
    let solver = SolverSettings {
        tol: s.tol.unwrap_or(1e-10),
        max_iters: s.max_iters.filter(|&m| m > 0),
        jacobi: s.jacobi.unwrap_or(false),
    };
    if !(solver.tol > 0.0) {
        return Err(Error::config("solver tol must be positive"));
    }

    let b = raw.bayes.unwrap_or_default();
    let bayes = BayesSettings {
        y: b.y.unwrap_or(1.0),
        gamma_std: b.gamma_std.unwrap_or(1.0),
        n_samples: b.n_samples.unwrap_or(4096),
        steps: b.steps.unwrap_or(2000),
    };
    if bayes.n_samples < 1 || bayes.steps < 1 || !(bayes.gamma_std > 0.0) {
        return Err(Error::config(
            "bayes needs n_samples >= 1, steps >= 1 and gamma_std > 0",
        ));
    }

    Ok(ExperimentConfig {
        mode: raw.mode,
        preset: raw.preset,
        master_seed: raw.master_seed.unwrap_or(7),
        out_dir: PathBuf::from(raw.out_dir.unwrap_or_else(|| "runs".into())),
        threads: raw.threads.unwrap_or(0),
        dataset_path: raw.dataset.map(PathBuf::from),
        prior,
        data_family,
        mesh,
        data,
        loss,
        optimizer,
        operator,
        solver,
        bayes,
        reference_rel_errors_pct: raw.reference_rel_errors_pct,
        reference_surrogate_pct: raw.reference_surrogate_pct,
    })
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge_toml(slot, v),
                    Some(slot) => *slot = v,
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Parse and validate a config document, expanding its preset if named.
pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse_config_str(&text)
}

/// As [`parse_config`] for an in-memory document.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let file_val: toml::Value = text
        .parse()
        .map_err(|e| Error::config(format!("invalid TOML: {e}")))?;
    let merged = match file_val.get("preset").and_then(|v| v.as_str()) {
        Some(name) => {
            let base_text = preset_toml(name)?;
            let mut base: toml::Value = base_text.parse().expect("builtin preset must parse");
            merge_toml(&mut base, file_val);
            base
        }
        None => file_val,
    };
    let raw: RawConfig = merged
        .try_into()
        .map_err(|e| Error::config(format!("invalid config: {e}")))?;
    resolve(raw)
}

/// Built-in preset names.
pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|(n, _)| *n).collect()
}

/// TOML body of a named preset.
pub fn preset_toml(name: &str) -> Result<&'static str> {
    PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| {
            Error::config(format!(
                "unknown preset '{name}'; available: {}",
                preset_names().join(", ")
            ))
        })
}

const PRESETS: &[(&str, &str)] = &[
    (
        "darcy1d-levelset",
        r#"
reference_rel_errors_pct = [0.96, 0.28, 0.56]

[prior]
family = "levelset-smooth"
lambda = 8.0
kappa_minus = 1.0
kappa_plus = 2.0
beta = 4.0
tau = 10.0
modes = 20

[mesh]
dim = 1
n = 100

[data]
n_systems = 1000
d_y = 50
gamma_std = 0.01
f_const = 10.0
true_family = "levelset-sharp"

[loss]
n_s = 1000
n_dirs = 1000

[optimizer]
lr = 0.01
halvings = 4
iters = 1000
"#,
    ),
    (
        "darcy1d-levelset-desk",
        r#"
reference_rel_errors_pct = [0.96, 0.28, 0.56]

[prior]
family = "levelset-smooth"
lambda = 8.0
kappa_minus = 1.0
kappa_plus = 2.0
beta = 4.0
tau = 10.0
modes = 20

[mesh]
dim = 1
n = 65

[data]
n_systems = 200
d_y = 50
gamma_std = 0.01
f_const = 10.0
true_family = "levelset-sharp"

[loss]
n_s = 200
n_dirs = 1000

[optimizer]
lr = 0.01
halvings = 4
iters = 600
"#,
    ),
    (
        "darcy2d-levelset",
        r#"
reference_rel_errors_pct = [1.96, 0.03, 0.39]

[prior]
family = "levelset-smooth"
lambda = 5.0
kappa_minus = 1.0
kappa_plus = 2.0
beta = 4.0
tau = 5.0
modes = 20

[mesh]
dim = 2
n = 100

[data]
n_systems = 1000
d_y = 50
gamma_std = 0.01
f_const = 10.0
true_family = "levelset-sharp"

[loss]
n_s = 100
n_dirs = 1000

[loss.regularizer]
enabled = true
m_h = [2.302585092994046, 1.0986122886681098, 1.0986122886681098]
sigma_h = 2.0

[optimizer]
lr = 0.01
halvings = 4
iters = 2000
"#,
    ),
    (
        "darcy2d-levelset-desk",
        r#"
reference_rel_errors_pct = [1.96, 0.03, 0.39]

[prior]
family = "levelset-smooth"
lambda = 5.0
kappa_minus = 1.0
kappa_plus = 2.0
beta = 4.0
tau = 5.0
modes = 12

[mesh]
dim = 2
n = 33

[data]
n_systems = 200
d_y = 50
gamma_std = 0.01
f_const = 10.0
true_family = "levelset-sharp"

[loss]
n_s = 64
n_dirs = 1000

[loss.regularizer]
enabled = true
m_h = [2.302585092994046, 1.0986122886681098, 1.0986122886681098]
sigma_h = 2.0

[optimizer]
lr = 0.01
halvings = 4
iters = 400
"#,
    ),
    (
        "darcy1d-levelset-op",
        r#"
reference_rel_errors_pct = [4.18, 0.71, 1.13]
reference_surrogate_pct = 0.40

[prior]
family = "levelset-smooth"
lambda = 8.0
kappa_minus = 1.0
kappa_plus = 2.0
beta = 4.0
tau = 10.0
modes = 20

[mesh]
dim = 1
n = 100

[data]
n_systems = 1000
d_y = 50
gamma_std = 0.01
f_const = 10.0
true_family = "levelset-sharp"

[loss]
n_s = 1000
n_r = 20
n_dirs = 1000

[optimizer]
lr = 0.01
halvings = 4
iters = 1000

[operator]
layers = 4
channels = 64
modes = 8
inner_steps = 10
lr_phi = 0.001
"#,
    ),
    (
        "darcy1d-levelset-op-desk",
        r#"
reference_rel_errors_pct = [4.18, 0.71, 1.13]
reference_surrogate_pct = 0.40

[prior]
family = "levelset-smooth"
lambda = 8.0
kappa_minus = 1.0
kappa_plus = 2.0
beta = 4.0
tau = 10.0
modes = 20

[mesh]
dim = 1
n = 65

[data]
n_systems = 200
d_y = 50
gamma_std = 0.01
f_const = 10.0
true_family = "levelset-sharp"

[loss]
n_s = 200
n_r = 20
n_dirs = 1000

[optimizer]
lr = 0.01
halvings = 4
iters = 600

[operator]
layers = 2
channels = 16
modes = 8
inner_steps = 10
lr_phi = 0.002
"#,
    ),
    (
        "darcy2d-levelset-op",
        r#"
reference_rel_errors_pct = [3.19, 0.98, 0.10]
reference_surrogate_pct = 0.73

[prior]
family = "levelset-smooth"
lambda = 5.0
kappa_minus = 1.0
kappa_plus = 2.0
beta = 4.0
tau = 5.0
modes = 20

[mesh]
dim = 2
n = 100

[data]
n_systems = 1000
d_y = 50
gamma_std = 0.01
f_const = 10.0
true_family = "levelset-sharp"

[loss]
n_s = 100
n_r = 20
n_dirs = 1000

[loss.regularizer]
enabled = true
m_h = [2.302585092994046, 1.0986122886681098, 1.0986122886681098]
sigma_h = 2.0

[optimizer]
lr = 0.01
halvings = 4
iters = 2000

[operator]
layers = 4
channels = 64
modes = 8
inner_steps = 10
lr_phi = 0.001
"#,
    ),
    (
        "darcy2d-lognormal",
        r#"
reference_rel_errors_pct = [1.26, 0.66]

[prior]
family = "lognormal"
nu = 1.5
ell = 0.5
sigma = 1.0
modes = 20

[mesh]
dim = 2
n = 100

[data]
n_systems = 1000
d_y = 50
gamma_std = 0.01
f_const = 10.0

[loss]
n_s = 100
n_dirs = 1000

[loss.regularizer]
enabled = true
m_h = [1.252762968495368, 0.0]
sigma_h = 2.0

[optimizer]
lr = 0.01
halvings = 4
iters = 2000
alpha0 = [3.5, 1.0]
"#,
    ),
    (
        "darcy2d-lognormal-desk",
        r#"
reference_rel_errors_pct = [1.26, 0.66]

[prior]
family = "lognormal"
nu = 1.5
ell = 0.5
sigma = 1.0
modes = 12

[mesh]
dim = 2
n = 32

[data]
n_systems = 200
d_y = 50
gamma_std = 0.01
f_const = 10.0

[loss]
n_s = 64
n_dirs = 1000

[loss.regularizer]
enabled = true
m_h = [1.252762968495368, 0.0]
sigma_h = 2.0

[optimizer]
lr = 0.01
halvings = 4
iters = 400
alpha0 = [3.5, 1.0]
"#,
    ),
    (
        "darcy2d-lognormal-op",
        r#"
reference_rel_errors_pct = [0.44, 3.13]
reference_surrogate_pct = 0.128

[prior]
family = "lognormal"
nu = 1.5
ell = 0.5
sigma = 1.0
modes = 20

[mesh]
dim = 2
n = 100

[data]
n_systems = 1000
d_y = 50
gamma_std = 0.01
f_const = 10.0

[loss]
n_s = 100
n_r = 20
n_dirs = 1000

[loss.regularizer]
enabled = true
m_h = [1.252762968495368, 0.0]
sigma_h = 2.0

[optimizer]
lr = 0.01
halvings = 4
iters = 10000
alpha0 = [3.5, 1.0]

[operator]
layers = 4
channels = 64
modes = 8
inner_steps = 10
lr_phi = 0.001
"#,
    ),
    (
        "darcy2d-lognormal-unident",
        r#"
[prior]
family = "lognormal"
nu = 4.0
ell = 0.5
sigma = 1.0
modes = 20

[mesh]
dim = 2
n = 100

[data]
n_systems = 1000
d_y = 50
gamma_std = 0.01
f_const = 10.0

[loss]
n_s = 100
n_r = 20
n_dirs = 1000

[loss.regularizer]
enabled = true
m_h = [1.252762968495368, 0.0]
sigma_h = 2.0

[optimizer]
lr = 0.01
halvings = 6
iters = 20000
alpha0 = [3.5, 1.0]

[operator]
layers = 4
channels = 64
modes = 8
inner_steps = 10
lr_phi = 0.001
amsgrad_phi = true
"#,
    ),
    (
        "darcy2d-lognormal-unident-desk",
        r#"
[prior]
family = "lognormal"
nu = 4.0
ell = 0.5
sigma = 1.0
modes = 12

[mesh]
dim = 2
n = 32

[data]
n_systems = 200
d_y = 50
gamma_std = 0.01
f_const = 10.0

[loss]
n_s = 32
n_dirs = 1000

[loss.regularizer]
enabled = true
m_h = [1.252762968495368, 0.0]
sigma_h = 2.0

[optimizer]
lr = 0.01
halvings = 2
iters = 200
alpha0 = [2.0, 1.5]
"#,
    ),
];

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_documented_defaults() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.loss.n_s, 200);
        assert_eq!(cfg.loss.n_dirs, 1000);
        assert_eq!(cfg.optimizer.iters, 600);
        assert_eq!(cfg.mesh.n, 65);
        assert_eq!(cfg.prior.family, Family::LevelSetSmooth);
    }

    #[test]
    fn unknown_key_is_a_hard_error_naming_the_key() {
        let err = parse_config_str("[optimizer]\nlearnig_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learnig_rate"), "{msg}");
    }

    #[test]
    fn full_scale_preset_expands_to_reference_values() {
        let cfg = parse_config_str("preset = \"darcy1d-levelset\"\n").unwrap();
        assert_eq!(cfg.prior.alpha, vec![8.0, 1.0, 2.0]);
        assert_eq!(cfg.prior.tau, 10.0);
        assert_eq!(cfg.data.f_const, 10.0);
        assert_eq!(cfg.data.d_y, 50);
        assert_eq!(cfg.data.gamma_std, 0.01);
        assert_eq!(cfg.data_family, Family::LevelSetSharp);
        assert_eq!(cfg.optimizer.iters, 1000);
    }

    #[test]
    fn file_values_override_preset() {
        let cfg =
            parse_config_str("preset = \"darcy1d-levelset-desk\"\n[optimizer]\niters = 50\n")
                .unwrap();
        assert_eq!(cfg.optimizer.iters, 50);
        assert_eq!(cfg.loss.n_s, 200);
    }

    #[test]
    fn unknown_preset_is_rejected() {
        assert!(parse_config_str("preset = \"no-such\"\n").is_err());
    }

    #[test]
    fn regularizer_dimension_is_validated() {
        let bad = r#"
[prior]
family = "lognormal"
[loss.regularizer]
enabled = true
m_h = [0.0]
sigma_h = 2.0
"#;
        assert!(parse_config_str(bad).is_err());
    }
}
