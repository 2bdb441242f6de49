//! Command-line front end: dataset generation, calibration runs,
//! verification suites and diagnostics, all driven by a TOML config.

use clap::{Args, Parser, Subcommand};
use priorflow_core::config::{parse_config, parse_config_str, ExperimentConfig, Mode};
use priorflow_core::runner;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "priorflow",
    about = "Learn parametric priors over PDE coefficient fields from indirect observations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; omit to use built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap; 0 uses all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Emit PNG line plots of the trace next to trace.csv.
    #[arg(long)]
    plots: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from the configured true prior.
    GenData(Common),
    /// Calibrate prior parameters against the reference solver.
    Calibrate(Common),
    /// Calibrate jointly with a residual-trained neural operator.
    CalibrateJoint(Common),
    /// Run the lemma and property verification suites.
    Verify(Common),
    /// Single-observation posterior recovery check.
    BayesCheck(Common),
    /// Manufactured-solution mesh-refinement table.
    FemConvergence(Common),
}

impl Command {
    fn mode(&self) -> Mode {
        match self {
            Command::GenData(_) => Mode::GenData,
            Command::Calibrate(_) => Mode::Calibrate,
            Command::CalibrateJoint(_) => Mode::CalibrateJoint,
            Command::Verify(_) => Mode::Verify,
            Command::BayesCheck(_) => Mode::BayesCheck,
            Command::FemConvergence(_) => Mode::FemConvergence,
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c)
            | Command::Calibrate(c)
            | Command::CalibrateJoint(c)
            | Command::Verify(c)
            | Command::BayesCheck(c)
            | Command::FemConvergence(c) => c,
        }
    }
}

fn load_config(common: &Common, mode: Mode) -> priorflow_core::Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => parse_config(path)?,
        None => parse_config_str("")?,
    };
    if let Some(file_mode) = cfg.mode {
        if file_mode != mode {
            return Err(priorflow_core::Error::Config(format!(
                "config sets mode '{}' but the CLI asked for '{}'",
                file_mode.name(),
                mode.name()
            )));
        }
    }
    cfg.mode = Some(mode);
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mode = cli.command.mode();
    let common = cli.command.common();
    let cfg = match load_config(common, mode) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    match runner::run(&cfg, common.plots) {
        Ok(outcome) => {
            for line in &outcome.lines {
                println!("{line}");
            }
            for artifact in &outcome.artifacts {
                println!("artifact: {}", artifact.display());
            }
            if outcome.ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
