use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use axdt::fiber::{extract_fibers, threshold_mask, volume_stats, VolumeStats};
use axdt::geometry::{sphere_covering_geometry, CoefficientVolume, DetectorSpec, ScalarVolume, VolumeGrid};
use axdt::io;
use axdt::models::{estimate_anorm, lipschitz_bound, LipschitzReport, M1Model, M2Model, M3Model, ScaledObjective};
use axdt::optim::{cgls, run, Algorithm, RunStatus};
use axdt::projector::XRayTransform;
use axdt::simulate::{make_crossed_rods_phantom, simulate_measurements};
use axdt::sphharm::sphere_grid;
use axdt::vecops::norm;
use axdt::{
    AcquisitionGeometry, AxdtOperator, ConvergenceLog, LinearOperator, MeasurementSet, ModelKind, OptimizerConfig,
};
use log::{info, warn};
use serde::Serialize;

use crate::config::{require_exists, RunConfig};
use crate::error::CliError;

pub const GEOMETRY_FILE: &str = "geometry.txt";
pub const MEASUREMENTS: &str = "measurements";
pub const CONFIG_FILE: &str = "run.toml";
pub const CACHE_DIR: &str = "cache";

fn output_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg
        .paths
        .output
        .clone()
        .ok_or_else(|| CliError::Usage("an output directory is required (--out)".into()))?;
    fs::create_dir_all(&out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
    Ok(out)
}

fn input_dir(path: &Option<PathBuf>, what: &str, flag: &str) -> Result<PathBuf, CliError> {
    let dir = path
        .clone()
        .ok_or_else(|| CliError::Usage(format!("a {what} directory is required ({flag})")))?;
    require_exists(&dir, what)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn operator(
    geom: &AcquisitionGeometry,
    cache: &Path,
    level: usize,
    max_degree: usize,
) -> Result<AxdtOperator, CliError> {
    let weights = io::load_or_compute_weights(cache, geom, level, max_degree)?;
    Ok(AxdtOperator::new(geom.clone(), weights)?)
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_simulation()?;
    let out = output_dir(cfg)?;
    let s = &cfg.scan;
    let grid = VolumeGrid::centered_cube(s.size, s.spacing)?;
    let phantom = make_crossed_rods_phantom(grid, &cfg.phantom)?;
    let geom = sphere_covering_geometry(s.poses, DetectorSpec::covering(&grid, s.pitch)?, grid)?;
    let op = operator(&geom, &out.join(CACHE_DIR), s.quadrature_level, cfg.phantom.max_degree)?;
    info!("simulating {} rays", geom.n_rays());
    let (data, _) = simulate_measurements(&phantom, &op, &cfg.simulation, false)?;
    if data.clamped > 0 {
        warn!("{} amplitudes were raised to the positivity floor", data.clamped);
    }
    io::write_geometry(&out.join(GEOMETRY_FILE), &geom)?;
    io::write_measurements(&out.join(MEASUREMENTS), &data)?;
    io::write_scalar_volume(&out.join("mu_gt"), &phantom.mu_gt)?;
    io::write_coefficient_volume(&out.join("eta_gt"), &phantom.eta_gt)?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    println!("wrote {} rays to {}", data.n_rays(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct Summary {
    model: ModelKind,
    algorithm: Algorithm,
    status: RunStatus,
    iterations: usize,
    initial_loss: Option<f64>,
    final_loss: Option<f64>,
    /// `||B eta - y|| / ||y||`, m1 only.
    relative_residual: Option<f64>,
    fgm_step: Option<f64>,
    line_search_fallbacks: usize,
    restarts: usize,
}

#[derive(Serialize)]
struct LipschitzFile {
    #[serde(flatten)]
    report: LipschitzReport,
    curvature_factor: f64,
    fgm_step_within_safe: Option<bool>,
}

fn load_scan(dir: &Path) -> Result<(AcquisitionGeometry, MeasurementSet), CliError> {
    let gpath = dir.join(GEOMETRY_FILE);
    require_exists(&gpath, "geometry")?;
    require_exists(&io::container_paths(&dir.join(MEASUREMENTS)).0, "measurements")?;
    let geom = io::read_geometry(&gpath)?;
    let data = io::read_measurements(&dir.join(MEASUREMENTS))?;
    data.check_geometry(&geom)?;
    Ok((geom, data))
}

pub fn reconstruct(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_reconstruction()?;
    let data_dir = input_dir(&cfg.paths.data, "data", "--data")?;
    let out = output_dir(cfg)?;
    let (geom, data) = load_scan(&data_dir)?;
    let rc = &cfg.reconstruct;
    let op = operator(
        &geom,
        &data_dir.join(CACHE_DIR),
        cfg.scan.quadrature_level,
        rc.max_degree,
    )?;
    let mut opt = cfg.optimizer.clone();
    let nv = geom.grid.n_voxels();

    let lipschitz = match rc.model {
        ModelKind::M2 => None,
        kind => {
            let anorm = estimate_anorm(&geom, rc.power_iters, cfg.seed)?;
            let factor = match kind {
                ModelKind::M3 => M3Model::new(&op, &data)?.curvature_factor(),
                _ => 1.0,
            };
            let report = lipschitz_bound(kind, anorm, rc.max_degree, factor)?;
            let safe = report.safe.expect("m1 and m3 have a bound");
            if opt.algorithm == Algorithm::Fgm && opt.fgm_step.is_none() {
                opt.fgm_step = Some(1.0 / safe);
                info!("fgm step set to 1/L = {:.3e}", 1.0 / safe);
            }
            let within = opt.fgm_step.map(|_| opt.fgm_step_within(safe));
            if within == Some(false) && opt.algorithm == Algorithm::Fgm {
                warn!("fgm step lies outside (0, 2/L); convergence is not guaranteed");
            }
            Some(LipschitzFile {
                report,
                curvature_factor: factor,
                fgm_step_within_safe: within,
            })
        }
    };
    if let Some(l) = &lipschitz {
        let json = serde_json::to_string_pretty(l).expect("report serializes");
        write_text(&out.join("lipschitz.json"), &json)?;
    }

    let (eta, mu, log, residual) = match rc.model {
        ModelKind::M1 => {
            let m1 = M1Model::new(&op, &data)?;
            let (eta, log) = if opt.algorithm == Algorithm::Cgls {
                cgls(&op, m1.rhs(), None, &opt)?
            } else {
                run(&m1, &vec![0.0; op.domain_len()], &opt)?
            };
            let r = axdt::vecops::sub(&op.apply(&eta), m1.rhs());
            let rel = norm(&r) / norm(m1.rhs()).max(f64::MIN_POSITIVE);
            (eta, None, log, Some(rel))
        }
        ModelKind::M3 => {
            let m3 = M3Model::new(&op, &data)?;
            let (eta, log) = run(&m3, &vec![0.0; op.domain_len()], &opt)?;
            (eta, None, log, None)
        }
        ModelKind::M2 => {
            let m2 = M2Model::new(&op, &data)?;
            let start = OptimizerConfig {
                grad_tol: 0.0,
                ..OptimizerConfig::new(Algorithm::Cgls, rc.attenuation_iters)
            };
            let (mut x0, _) = cgls(
                &XRayTransform::new(geom.clone()),
                &data.neg_log_transmission(),
                None,
                &start,
            )?;
            x0.extend(vec![0.0; op.domain_len()]);
            let scale = m2.block_scale(&x0);
            info!("m2 block scale {scale:.3e}");
            let scaled = ScaledObjective::new(&m2, m2.scaling(scale))?;
            let (z, log) = run(&scaled, &scaled.to_scaled(&x0), &opt)?;
            let mut x = scaled.to_original(&z);
            let eta = x.split_off(nv);
            (eta, Some(x), log, None)
        }
    };

    let eta = CoefficientVolume::from_values(geom.grid, rc.max_degree, eta)?;
    io::write_coefficient_volume(&out.join("eta"), &eta)?;
    if let Some(mu) = mu {
        io::write_scalar_volume(&out.join("mu"), &ScalarVolume::from_values(geom.grid, mu)?)?;
    }
    log.write_csv(&out.join("convergence.csv"))?;
    let summary = Summary {
        model: rc.model,
        algorithm: opt.algorithm,
        status: log.status,
        iterations: log.iterations(),
        initial_loss: log.initial_loss(),
        final_loss: log.final_loss(),
        relative_residual: residual,
        fgm_step: opt.fgm_step,
        line_search_fallbacks: log.line_search_fallbacks,
        restarts: log.restarts,
    };
    write_text(
        &out.join("summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    write_text(&out.join(CONFIG_FILE), &cfg.to_toml())?;
    report_run(&log);
    match log.status {
        RunStatus::Diverged | RunStatus::NonFinite => Err(CliError::Runtime(format!(
            "optimizer stopped with status {} after {} iterations; partial outputs kept",
            log.status,
            log.iterations()
        ))),
        _ => Ok(()),
    }
}

fn report_run(log: &ConvergenceLog) {
    println!(
        "status {} after {} iterations, loss {:e} -> {:e}",
        log.status,
        log.iterations(),
        log.initial_loss().unwrap_or(f64::NAN),
        log.final_loss().unwrap_or(f64::NAN)
    );
}

/// `region,count,mean,variance,q95` rows.
pub fn stats_csv(rows: &[(&str, VolumeStats)]) -> String {
    let mut out = String::from("region,count,mean,variance,q95\n");
    for (name, s) in rows {
        writeln!(out, "{name},{},{},{},{}", s.count, s.mean, s.variance, s.q95).unwrap();
    }
    out
}

pub fn extract(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.validate_extraction()?;
    let recon = input_dir(&cfg.paths.reconstruction, "reconstruction", "--recon")?;
    let out = output_dir(cfg)?;
    let stem = recon.join("eta");
    require_exists(&io::container_paths(&stem).0, "coefficient volume")?;
    let eta = io::read_coefficient_volume(&stem)?;
    let field = extract_fibers(&eta, &sphere_grid(cfg.extract.quadrature_level))?;
    let kept = threshold_mask(&field, cfg.extract.threshold)?;
    kept.write_csv(&out.join("fibers.csv"))?;
    io::write_scalar_volume(&out.join("strength"), &kept.strength_volume())?;
    let mask_values = kept.mask.iter().map(|&m| f64::from(u8::from(m))).collect();
    io::write_scalar_volume(&out.join("mask"), &ScalarVolume::from_values(eta.grid, mask_values)?)?;

    let mut rows = vec![("full", volume_stats(&kept.strength, None)?)];
    if kept.n_kept() > 0 {
        rows.push(("segmentation", volume_stats(&kept.strength, Some(&kept.mask))?));
    }
    write_text(&out.join("stats.csv"), &stats_csv(&rows))?;
    println!("{} of {} voxels kept", kept.n_kept(), kept.mask.len());
    if kept.n_kept() == 0 {
        return Err(CliError::Warning(format!(
            "no voxel passed the threshold {}; mask is empty",
            cfg.extract.threshold
        )));
    }
    Ok(())
}

pub fn stats(cfg: &RunConfig) -> Result<(), CliError> {
    let stem = cfg
        .paths
        .strength
        .clone()
        .ok_or_else(|| CliError::Usage("a strength volume is required (--strength)".into()))?;
    require_exists(&io::container_paths(&stem).0, "strength volume")?;
    let strength = io::read_scalar_volume(&stem)?;
    let mut rows = vec![("full", volume_stats(&strength.values, None)?)];
    if let Some(mstem) = &cfg.paths.mask {
        require_exists(&io::container_paths(mstem).0, "mask volume")?;
        let mask = io::read_scalar_volume(mstem)?;
        if mask.grid.dims != strength.grid.dims {
            return Err(CliError::Usage("mask and strength volumes differ in shape".into()));
        }
        let sel: Vec<bool> = mask.values.iter().map(|&v| v != 0.0).collect();
        if !sel.contains(&true) {
            return Err(CliError::Usage("the segmentation mask is empty".into()));
        }
        rows.push(("segmentation", volume_stats(&strength.values, Some(&sel))?));
    }
    let csv = stats_csv(&rows);
    if let Some(out) = &cfg.paths.output {
        fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        write_text(&out.join("stats.csv"), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

#[derive(Serialize)]
struct BenchReport {
    anorm: f64,
    bnorm_nominal: f64,
    bnorm_safe: f64,
    l_m1_safe: f64,
    l_m1_nominal: f64,
    l_m3_safe: Option<f64>,
    l_m3_nominal: Option<f64>,
}

pub fn bench_lipschitz(cfg: &RunConfig) -> Result<(), CliError> {
    let rc = &cfg.reconstruct;
    let (geom, data) = match &cfg.paths.data {
        Some(dir) => {
            require_exists(dir, "data")?;
            let (g, d) = load_scan(dir)?;
            (g, Some((d, dir.join(CACHE_DIR))))
        }
        None => {
            cfg.validate_simulation()?;
            let s = &cfg.scan;
            let grid = VolumeGrid::centered_cube(s.size, s.spacing)?;
            (
                sphere_covering_geometry(s.poses, DetectorSpec::covering(&grid, s.pitch)?, grid)?,
                None,
            )
        }
    };
    let anorm = estimate_anorm(&geom, rc.power_iters, cfg.seed)?;
    let l1 = lipschitz_bound(ModelKind::M1, anorm, rc.max_degree, 1.0)?;
    let l3 = match data {
        Some((d, cache)) => {
            let op = operator(&geom, &cache, cfg.scan.quadrature_level, rc.max_degree)?;
            let factor = M3Model::new(&op, &d)?.curvature_factor();
            Some(lipschitz_bound(ModelKind::M3, anorm, rc.max_degree, factor)?)
        }
        None => None,
    };
    let report = BenchReport {
        anorm,
        bnorm_nominal: l1.bnorm.nominal_bound,
        bnorm_safe: l1.bnorm.safe_bound,
        l_m1_safe: l1.safe.unwrap_or(f64::NAN),
        l_m1_nominal: l1.nominal.unwrap_or(f64::NAN),
        l_m3_safe: l3.and_then(|r| r.safe),
        l_m3_nominal: l3.and_then(|r| r.nominal),
    };
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    if let Some(out) = &cfg.paths.output {
        fs::create_dir_all(out).map_err(|e| CliError::Io(format!("{}: {e}", out.display())))?;
        write_text(&out.join("lipschitz.json"), &json)?;
    }
    println!("{json}");
    Ok(())
}
