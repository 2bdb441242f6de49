//! Mode dispatch: wires configs to dataset generation, the calibration
//! algorithms, the verification suites and the diagnostic modes, and writes
//! the run artifacts (dataset.json, trace.csv, summary.json, operator blob).

use crate::calib::{self, BilevelConfig, CalibContext, RunTrace};
use crate::config::{ExperimentConfig, Mode};
use crate::error::{Error, Result};
use crate::fem::{self, Dataset};
use crate::mesh::Mesh;
use crate::nop::{self, FnoConfig, FnoContext, OperatorParams};
use crate::plot;
use crate::randfield::NodalField;
use crate::seeds::{substream, Stream};
use crate::verify;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

/// What a run produced, for the CLI to report.
#[derive(Debug, Default)]
pub struct RunOutcome {
    pub ok: bool,
    pub artifacts: Vec<PathBuf>,
    pub lines: Vec<String>,
}

impl RunOutcome {
    fn artifact(&mut self, p: PathBuf) {
        self.artifacts.push(p);
    }

    fn line(&mut self, s: String) {
        self.lines.push(s);
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedsEcho {
    pub master: u64,
}

/// Final run summary; field order is the canonical summary.json layout.
#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub version: u32,
    pub mode: String,
    pub preset: Option<String>,
    pub family: String,
    pub final_alpha: Vec<f64>,
    pub final_alpha_raw: Vec<f64>,
    pub true_alpha: Option<Vec<f64>>,
    pub relative_errors: Option<Vec<f64>>,
    pub relative_errors_pct: Option<Vec<f64>>,
    pub reference_rel_errors_pct: Option<Vec<f64>>,
    pub surrogate_rel_l2: Option<f64>,
    pub reference_surrogate_pct: Option<f64>,
    pub iters: usize,
    pub final_loss: f64,
    pub runtime_ms: f64,
    pub seeds: SeedsEcho,
    pub metadata: BTreeMap<String, String>,
    pub config: serde_json::Value,
}

/// Assemble the summary for a finished calibration run. Relative errors are
/// reported per component with the level-set contrast pair sorted.
pub fn report(
    trace: &RunTrace,
    cfg: &ExperimentConfig,
    mode: Mode,
    surrogate_rel_l2: Option<f64>,
) -> Result<Summary> {
    let rel_pct = trace
        .relative_errors
        .as_ref()
        .map(|v| v.iter().map(|e| 100.0 * e).collect());
    Ok(Summary {
        version: 1,
        mode: mode.name().to_string(),
        preset: cfg.preset.clone(),
        family: trace.family.name().to_string(),
        final_alpha: trace.final_alpha.clone(),
        final_alpha_raw: trace.final_alpha_raw.clone(),
        true_alpha: trace.true_alpha.clone(),
        relative_errors: trace.relative_errors.clone(),
        relative_errors_pct: rel_pct,
        reference_rel_errors_pct: cfg.reference_rel_errors_pct.clone(),
        surrogate_rel_l2,
        reference_surrogate_pct: cfg.reference_surrogate_pct,
        iters: trace.rows.len(),
        final_loss: trace.rows.last().map(|r| r.loss).unwrap_or(f64::NAN),
        runtime_ms: trace.runtime_ms,
        seeds: SeedsEcho {
            master: trace.master_seed,
        },
        metadata: trace.metadata.clone(),
        config: serde_json::to_value(cfg)?,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn init_threads(threads: usize) {
    if threads > 0 {
        // ignore failure when a pool already exists (tests, repeated runs)
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn emit_trace_plots(out_dir: &Path, trace: &RunTrace, outcome: &mut RunOutcome) -> Result<()> {
    let k = trace.final_alpha.len();
    let mut cols: Vec<Vec<f64>> = vec![Vec::with_capacity(trace.rows.len()); k];
    let mut losses = Vec::with_capacity(trace.rows.len());
    for row in &trace.rows {
        for (c, a) in cols.iter_mut().zip(&row.alpha) {
            c.push(*a);
        }
        losses.push(row.loss);
    }
    let names = trace.family.alpha_names();
    let series: Vec<plot::Series> = cols
        .iter()
        .enumerate()
        .map(|(i, v)| plot::Series {
            label: names.get(i).copied().unwrap_or("alpha"),
            values: v,
            color: plot::PALETTE[i % plot::PALETTE.len()],
        })
        .collect();
    let alpha_path = out_dir.join("alpha_trace.png");
    plot::line_chart(&alpha_path, 800, 500, &series)?;
    outcome.artifact(alpha_path);
    let loss_path = out_dir.join("loss_trace.png");
    plot::line_chart(
        &loss_path,
        800,
        500,
        &[plot::Series {
            label: "loss",
            values: &losses,
            color: plot::PALETTE[0],
        }],
    )?;
    outcome.artifact(loss_path);
    Ok(())
}

fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let path = cfg.dataset_path_resolved();
    if !path.exists() {
        return Err(Error::config(format!(
            "dataset not found at {}; run gen-data first or set `dataset`",
            path.display()
        )));
    }
    let ds = Dataset::load(&path)?;
    if ds.mesh != cfg.mesh {
        return Err(Error::config(format!(
            "dataset mesh {:?} does not match configured mesh {:?}",
            ds.mesh, cfg.mesh
        )));
    }
    if ds.d_y != cfg.data.d_y {
        return Err(Error::config(format!(
            "dataset d_y = {} does not match configured d_y = {}",
            ds.d_y, cfg.data.d_y
        )));
    }
    Ok(ds)
}

fn fno_config(cfg: &ExperimentConfig) -> FnoConfig {
    FnoConfig {
        dim: cfg.mesh.dim,
        n: cfg.mesh.n,
        layers: cfg.operator.layers,
        channels: cfg.operator.channels,
        modes: cfg.operator.modes,
    }
}

/// Execute one mode and write its artifacts under the output directory.
pub fn run(cfg: &ExperimentConfig, emit_plots: bool) -> Result<RunOutcome> {
    let mode = cfg
        .mode
        .ok_or_else(|| Error::config("no mode given (CLI subcommand or `mode` key)"))?;
    init_threads(cfg.threads);
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mut outcome = RunOutcome {
        ok: true,
        ..Default::default()
    };

    match mode {
        Mode::GenData => {
            let true_spec = cfg.true_spec()?;
            let ds = fem::generate_dataset(
                &true_spec,
                cfg.data.n_systems,
                cfg.data.d_y,
                cfg.data.gamma_std,
                cfg.data.f_const,
                cfg.mesh,
                cfg.master_seed,
            )?;
            let path = cfg.dataset_path_resolved();
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            ds.save(&path)?;
            outcome.line(format!(
                "wrote dataset: {} systems x {} observations ({})",
                ds.n_systems,
                ds.d_y,
                path.display()
            ));
            outcome.artifact(path);
        }

        Mode::Calibrate | Mode::CalibrateJoint => {
            let ds = load_dataset(cfg)?;
            let ctx = CalibContext::new(
                &ds,
                cfg.prior.clone(),
                cfg.loss.clone(),
                cfg.solver.to_options(),
            )?;
            let (trace, surrogate) = if mode == Mode::Calibrate {
                (calib::run_algorithm1(&ctx, &cfg.optimizer, cfg.master_seed)?, None)
            } else {
                let bilevel = BilevelConfig {
                    fno: fno_config(cfg),
                    inner_steps: cfg.operator.inner_steps,
                    lr_phi: cfg.operator.lr_phi,
                    amsgrad_phi: cfg.operator.amsgrad_phi,
                    fixed_pool: cfg.operator.fixed_pool,
                    warm_start: cfg.operator.warm_start,
                };
                let (trace, phi) =
                    calib::run_algorithm2(&ctx, &cfg.optimizer, &bilevel, cfg.master_seed)?;
                let blob = cfg.out_dir.join("operator.bin");
                let sidecar = cfg.out_dir.join("operator.json");
                phi.save(&blob, &sidecar)?;
                outcome.artifact(blob);
                outcome.artifact(sidecar);
                let fidelity = surrogate_fidelity(cfg, &trace, &phi)?;
                outcome.line(format!(
                    "surrogate relative L2 error over 50 draws from the learned prior: {:.4}",
                    fidelity
                ));
                (trace, Some(fidelity))
            };

            let trace_path = cfg.out_dir.join("trace.csv");
            trace.write_csv(&trace_path)?;
            outcome.artifact(trace_path);
            let summary = report(&trace, cfg, mode, surrogate)?;
            let summary_path = cfg.out_dir.join("summary.json");
            write_json(&summary_path, &summary)?;
            outcome.artifact(summary_path);
            if emit_plots {
                emit_trace_plots(&cfg.out_dir, &trace, &mut outcome)?;
            }
            outcome.line(format!(
                "final alpha (sorted): {:?}",
                summary.final_alpha
            ));
            if let Some(pct) = &summary.relative_errors_pct {
                outcome.line(format!("relative errors vs true alpha (%): {pct:?}"));
            }
            if let Some(reference) = &summary.reference_rel_errors_pct {
                outcome.line(format!("full-scale reference errors (%): {reference:?}"));
            }
        }

        Mode::Verify => {
            let checks = verify::run_all(cfg.master_seed);
            let passed = checks.iter().filter(|c| c.passed).count();
            for c in &checks {
                outcome.line(format!(
                    "[{}] {} - {}",
                    if c.passed { "PASS" } else { "FAIL" },
                    c.name,
                    c.detail
                ));
            }
            outcome.line(format!("{passed}/{} checks passed", checks.len()));
            let path = cfg.out_dir.join("verify.json");
            write_json(&path, &checks)?;
            outcome.artifact(path);
            outcome.ok = passed == checks.len();
        }

        Mode::BayesCheck => {
            let b = cfg.bayes;
            let r = calib::bayes_check(b.y, b.gamma_std, b.n_samples, b.steps, cfg.master_seed)?;
            let rel_m = (r.m_star - r.m_analytic).abs() / r.m_analytic.abs().max(1e-12);
            let rel_s = (r.s_star - r.s_analytic).abs() / r.s_analytic;
            outcome.line(format!(
                "recovered (m, s) = ({:.6}, {:.6}); conjugate posterior ({:.6}, {:.6})",
                r.m_star, r.s_star, r.m_analytic, r.s_analytic
            ));
            outcome.line(format!(
                "relative gaps: mean {:.4}, std {:.4}",
                rel_m, rel_s
            ));
            let path = cfg.out_dir.join("bayes.json");
            write_json(&path, &r)?;
            outcome.artifact(path);
        }

        Mode::FemConvergence => {
            let table = manufactured_table(&[9, 17, 33, 65])?;
            outcome.line(format!("{:>6} {:>12} {:>14} {:>8}", "n", "h", "Linf error", "ratio"));
            for row in &table {
                outcome.line(format!(
                    "{:>6} {:>12.6} {:>14.6e} {:>8}",
                    row.n,
                    row.h,
                    row.err,
                    row.ratio
                        .map(|r| format!("{r:.3}"))
                        .unwrap_or_else(|| "-".into())
                ));
            }
            let path = cfg.out_dir.join("convergence.json");
            write_json(&path, &table)?;
            outcome.artifact(path);
        }
    }
    Ok(outcome)
}

fn surrogate_fidelity(
    cfg: &ExperimentConfig,
    trace: &RunTrace,
    phi: &OperatorParams,
) -> Result<f64> {
    let learned_spec = cfg.prior.with_alpha(&trace.final_alpha_raw)?;
    let table = crate::randfield::SynthesisTable::new(&learned_spec, cfg.mesh)?;
    let f = NodalField::constant(cfg.mesh, cfg.data.f_const);
    let fno_ctx = FnoContext::new(phi.cfg)?;
    nop::surrogate_rel_l2(
        phi,
        &learned_spec,
        &table,
        &f,
        &fno_ctx,
        50,
        substream(cfg.master_seed, Stream::Eval, 1),
        cfg.solver.tol,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub h: f64,
    pub err: f64,
    pub ratio: Option<f64>,
}

/// Manufactured-solution L∞ nodal errors and successive ratios across mesh
/// refinements.
pub fn manufactured_table(ns: &[usize]) -> Result<Vec<ConvergenceRow>> {
    use std::f64::consts::PI;
    let mut rows: Vec<ConvergenceRow> = Vec::with_capacity(ns.len());
    for &n in ns {
        let mesh = Mesh::new_2d(n)?;
        let z = NodalField::constant(mesh, 1.0);
        let exact = NodalField::from_fn(mesh, |x1, x2| (PI * x1).sin() * (PI * x2).sin());
        let f = NodalField::new(
            mesh,
            exact.values.iter().map(|&v| 2.0 * PI * PI * v).collect(),
        )?;
        let u = fem::solve_darcy(&z, &f, 1e-12)?;
        let err = u
            .values
            .iter()
            .zip(&exact.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        let ratio = rows.last().map(|prev: &ConvergenceRow| prev.err / err);
        rows.push(ConvergenceRow {
            n,
            h: mesh.h(),
            err,
            ratio,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::parse_config_str;

    #[test]
    fn gen_then_calibrate_tiny_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let toml = format!(
            r#"
out_dir = "{}"
master_seed = 5

[prior]
family = "levelset-smooth"
modes = 8

[mesh]
n = 33

[data]
n_systems = 12
d_y = 10
true_family = "levelset-sharp"

[loss]
n_s = 12
n_dirs = 32

[optimizer]
iters = 4
alpha0 = [7.0, 1.1, 1.9]
"#,
            dir.path().display()
        );
        let mut cfg = parse_config_str(&toml).unwrap();
        cfg.mode = Some(Mode::GenData);
        let out = run(&cfg, false).unwrap();
        assert!(out.ok);
        assert!(cfg.dataset_path_resolved().exists());

        cfg.mode = Some(Mode::Calibrate);
        let out = run(&cfg, true).unwrap();
        assert!(out.ok);
        let summary_path = dir.path().join("summary.json");
        assert!(summary_path.exists());
        assert!(dir.path().join("trace.csv").exists());
        assert!(dir.path().join("alpha_trace.png").exists());

        // determinism: rerun and compare alpha bitwise via the summaries
        let s1: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&summary_path).unwrap()).unwrap();
        run(&cfg, false).unwrap();
        let s2: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&summary_path).unwrap()).unwrap();
        assert_eq!(s1["final_alpha"], s2["final_alpha"]);

        // summary round-trips byte-identically
        let text = std::fs::read_to_string(&summary_path).unwrap();
        let reparsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string_pretty(&reparsed).unwrap(), text);
    }

    #[test]
    fn fem_convergence_table_is_second_order() {
        let rows = manufactured_table(&[17, 33]).unwrap();
        let ratio = rows[1].ratio.unwrap();
        assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
    }
}
