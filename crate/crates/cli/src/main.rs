//! `axdt`: simulate, reconstruct and analyse anisotropic dark-field scans.
//!
//! Every subcommand reads an optional TOML run configuration; flags override
//! the file. Exit codes: 0 success, 1 warning, 2 invalid usage or
//! configuration, 3 I/O, 4 runtime failure (e.g. a diverged optimizer).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use axdt::optim::{Algorithm, LineSearch};
use axdt::ModelKind;
use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{CliError, EXIT_USAGE};

/// Caps the worker thread count.
const THREADS_ENV: &str = "AXDT_THREADS";

#[derive(Parser)]
#[command(name = "axdt", version, about = "Anisotropic X-ray dark-field tomography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a crossed-rods scan.
    Simulate(Common),
    /// Reconstruct scattering coefficients from measurements.
    Reconstruct(Common),
    /// Extract fiber directions and scattering strength.
    Extract(Common),
    /// Mean, variance and 95% quantile of a strength volume.
    Stats(Common),
    /// Report operator norm and Lipschitz bounds.
    BenchLipschitz(Common),
}

#[derive(Args, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Directory with geometry and measurements.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Directory with a reconstruction.
    #[arg(long)]
    recon: Option<PathBuf>,
    /// Strength volume (path without extension).
    #[arg(long)]
    strength: Option<PathBuf>,
    /// Segmentation volume (path without extension).
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    algorithm: Option<Algorithm>,
    #[arg(long)]
    line_search: Option<LineSearch>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    grad_tol: Option<f64>,
    #[arg(long)]
    fgm_step: Option<f64>,
    #[arg(long)]
    lbfgs_memory: Option<usize>,
    /// Cube edge length in voxels.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    poses: Option<usize>,
    #[arg(long)]
    pitch: Option<f64>,
    #[arg(long)]
    alpha0: Option<f64>,
    #[arg(long)]
    a0: Option<f64>,
    /// Disable measurement noise.
    #[arg(long)]
    noiseless: bool,
    #[arg(long)]
    threshold: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl Common {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        set(&mut cfg.seed, self.seed);
        let p = &mut cfg.paths;
        for (slot, v) in [
            (&mut p.output, self.out),
            (&mut p.data, self.data),
            (&mut p.reconstruction, self.recon),
            (&mut p.strength, self.strength),
            (&mut p.mask, self.mask),
        ] {
            if v.is_some() {
                *slot = v;
            }
        }
        set(&mut cfg.reconstruct.model, self.model);
        let o = &mut cfg.optimizer;
        set(&mut o.algorithm, self.algorithm);
        set(&mut o.line_search, self.line_search);
        set(&mut o.max_iters, self.iters);
        set(&mut o.grad_tol, self.grad_tol);
        set(&mut o.lbfgs_memory, self.lbfgs_memory);
        if self.fgm_step.is_some() {
            o.fgm_step = self.fgm_step;
        }
        set(&mut cfg.scan.size, self.size);
        set(&mut cfg.scan.poses, self.poses);
        set(&mut cfg.scan.pitch, self.pitch);
        set(&mut cfg.simulation.alpha0, self.alpha0);
        set(&mut cfg.simulation.a0, self.a0);
        if self.noiseless {
            cfg.simulation.noise = false;
        }
        set(&mut cfg.extract.threshold, self.threshold);
        cfg.propagate_seed();
        Ok(cfg)
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(e.to_string()))
}

fn dispatch(command: Command) -> Result<(), CliError> {
    configure_threads()?;
    match command {
        Command::Simulate(c) => commands::simulate(&c.resolve()?),
        Command::Reconstruct(c) => commands::reconstruct(&c.resolve()?),
        Command::Extract(c) => commands::extract(&c.resolve()?),
        Command::Stats(c) => commands::stats(&c.resolve()?),
        Command::BenchLipschitz(c) => commands::bench_lipschitz(&c.resolve()?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { 0 });
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Warning(msg) => log::warn!("{msg}"),
                _ => log::error!("{e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
