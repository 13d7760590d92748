//! Synthetic phantoms and phase-stepping measurements.
//!
//! Noise follows the amplitude statistics of a phase-stepping scan with `N`
//! steps: `a_s ~ Normal(a, var = a/N)` and `b_s/2 ~ Rice(b/2, sqrt(a/(2N)))`.
//! Each ray draws from its own ChaCha8 stream, so results do not depend on
//! thread scheduling.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CoefficientVolume, ScalarVolume, Vec3, VolumeGrid};
use crate::models::MeasurementSet;
use crate::projector::{check_grid, project_raw, LinearOperator};
use crate::sphharm::{even_sh_values, sphere_grid, AxdtOperator, SphereGrid, DEFAULT_QUADRATURE_LEVEL};

/// Ground truth for a synthetic scan.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub mu_gt: ScalarVolume,
    pub eta_gt: CoefficientVolume,
    /// Rod axis per voxel, `None` outside the rods.
    pub fiber_gt: Vec<Option<Vec3>>,
}

impl Phantom {
    /// Smallest value of the scattering function over the nodes of `grid`.
    pub fn min_scattering(&self, grid: &SphereGrid) -> f64 {
        let basis: Vec<Vec<f64>> = grid
            .nodes
            .iter()
            .map(|u| even_sh_values(self.eta_gt.max_degree, u))
            .collect();
        (0..self.eta_gt.grid.n_voxels())
            .map(|v| {
                let c = self.eta_gt.voxel(v);
                basis
                    .iter()
                    .map(|y| y.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(f64::INFINITY, f64::min)
    }
}

/// Two cylinders in planes parallel to `z = 0`, stacked along `z` so they
/// touch at the center and cross at `angle_deg` in projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CrossedRods {
    /// Radius in world units.
    pub rod_radius: f64,
    /// Rod length as a fraction of the smaller lateral extent.
    pub length_fraction: f64,
    pub angle_deg: f64,
    pub eps_iso: f64,
    pub eps_aniso: f64,
    /// Attenuation inside the rods.
    pub mu: f64,
    pub max_degree: usize,
    pub quadrature_level: usize,
}

impl Default for CrossedRods {
    fn default() -> Self {
        Self {
            rod_radius: 5.0,
            length_fraction: 0.8,
            angle_deg: 90.0,
            eps_iso: 0.05,
            eps_aniso: 0.3,
            mu: 0.02,
            max_degree: 4,
            quadrature_level: DEFAULT_QUADRATURE_LEVEL,
        }
    }
}

/// Even-harmonic coefficients of `eps_iso + eps_aniso (1 - (u.f)^2)`.
pub fn rod_coefficients(axis: &Vec3, eps_iso: f64, eps_aniso: f64, grid: &SphereGrid, max_degree: usize) -> Vec<f64> {
    let f = axis.normalize();
    grid.project_even(max_degree, |u| {
        let c = u.dot(&f);
        eps_iso + eps_aniso * (1.0 - c * c)
    })
}

/// Axes of the two rods: in the `xy` plane, symmetric about `+x`.
pub fn rod_axes(angle_deg: f64) -> [Vec3; 2] {
    let h = 0.5 * angle_deg.to_radians();
    [Vec3::new(h.cos(), -h.sin(), 0.0), Vec3::new(h.cos(), h.sin(), 0.0)]
}

pub fn make_crossed_rods_phantom(grid: VolumeGrid, rods: &CrossedRods) -> Result<Phantom> {
    if !(rods.rod_radius > 0.0) || !(rods.length_fraction > 0.0) {
        return Err(Error::invalid("rod radius and length must be positive"));
    }
    if rods.eps_iso < 0.0 || rods.eps_aniso < 0.0 || rods.mu < 0.0 {
        return Err(Error::invalid("rod parameters must be nonnegative"));
    }
    let ext = grid.extent();
    let center = grid.center();
    let half_len = 0.5 * rods.length_fraction * ext[0].min(ext[1]);
    let axes = rod_axes(rods.angle_deg);
    let offsets = [-rods.rod_radius, rods.rod_radius];
    let lo = Vec3::new(grid.origin[0], grid.origin[1], grid.origin[2]);
    let hi = lo + Vec3::new(ext[0], ext[1], ext[2]);
    for (axis, dz) in axes.iter().zip(offsets) {
        let c = center + Vec3::new(0.0, 0.0, dz);
        for end in [c + half_len * axis, c - half_len * axis] {
            for d in 0..3 {
                let r = if d == 2 { rods.rod_radius } else { 0.0 };
                if end[d] - r < lo[d] || end[d] + r > hi[d] {
                    return Err(Error::invalid("rods do not fit in the grid"));
                }
            }
        }
    }

    let sphere = sphere_grid(rods.quadrature_level);
    let coeffs: Vec<Vec<f64>> = axes
        .iter()
        .map(|a| rod_coefficients(a, rods.eps_iso, rods.eps_aniso, &sphere, rods.max_degree))
        .collect();
    let mut mu = ScalarVolume::zeros(grid);
    let mut eta = CoefficientVolume::zeros(grid, rods.max_degree)?;
    let mut fiber = vec![None; grid.n_voxels()];
    let [nx, ny, nz] = grid.dims;
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                let x = grid.voxel_center(i, j, k);
                let v = grid.index(i, j, k);
                for (r, (axis, dz)) in axes.iter().zip(offsets).enumerate() {
                    let rel = x - (center + Vec3::new(0.0, 0.0, dz));
                    let along = rel.dot(axis);
                    let radial = (rel - along * axis).norm();
                    if along.abs() <= half_len && radial <= rods.rod_radius {
                        mu.values[v] = rods.mu;
                        eta.set_voxel(v, &coeffs[r]);
                        fiber[v] = Some(*axis);
                    }
                }
            }
        }
    }
    Ok(Phantom {
        mu_gt: mu,
        eta_gt: eta,
        fiber_gt: fiber,
    })
}

/// Distance of a voxel center to the axis of the rod it belongs to, or
/// `None` outside the rods.
pub fn rod_core_distance(grid: &VolumeGrid, rods: &CrossedRods, i: usize, j: usize, k: usize) -> Option<f64> {
    let x = grid.voxel_center(i, j, k);
    let center = grid.center();
    let half_len = 0.5 * rods.length_fraction * grid.extent()[0].min(grid.extent()[1]);
    rod_axes(rods.angle_deg)
        .iter()
        .zip([-rods.rod_radius, rods.rod_radius])
        .filter_map(|(axis, dz)| {
            let rel = x - (center + Vec3::new(0.0, 0.0, dz));
            let along = rel.dot(axis);
            let radial = (rel - along * axis).norm();
            (along.abs() <= half_len && radial <= rods.rod_radius).then_some(radial)
        })
        .reduce(f64::min)
}

/// Phase-stepping intensities, `phase_steps` samples per ray.
#[derive(Clone, Debug, PartialEq)]
pub struct SteppingSeries {
    pub n_rays: usize,
    pub phase_steps: usize,
    /// Ray-major samples.
    pub values: Vec<f64>,
}

impl SteppingSeries {
    pub fn ray(&self, j: usize) -> &[f64] {
        &self.values[j * self.phase_steps..(j + 1) * self.phase_steps]
    }
}

/// `I_k = a + b cos(2 pi k / N + phi)` for every ray.
pub fn synthesize_series(a: &[f64], b: &[f64], phi: &[f64], phase_steps: usize) -> Result<SteppingSeries> {
    if phase_steps < 3 {
        return Err(Error::invalid("at least 3 phase steps are required"));
    }
    if a.len() != b.len() || a.len() != phi.len() {
        return Err(Error::shape("a, b and phi must have the same length"));
    }
    let n = phase_steps as f64;
    let values = (0..a.len())
        .flat_map(|j| (0..phase_steps).map(move |k| a[j] + b[j] * (2.0 * PI * k as f64 / n + phi[j]).cos()))
        .collect();
    Ok(SteppingSeries {
        n_rays: a.len(),
        phase_steps,
        values,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourierComponents {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Mean, first-harmonic amplitude and phase of each ray.
pub fn extract_fourier(series: &SteppingSeries) -> Result<FourierComponents> {
    let n = series.phase_steps;
    if n < 3 {
        return Err(Error::invalid("at least 3 phase steps are required"));
    }
    if series.values.len() != series.n_rays * n {
        return Err(Error::shape("series length does not match n_rays * phase_steps"));
    }
    let (cos, sin): (Vec<f64>, Vec<f64>) = (0..n)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / n as f64;
            (t.cos(), t.sin())
        })
        .unzip();
    let mut out = FourierComponents {
        a: Vec::with_capacity(series.n_rays),
        b: Vec::with_capacity(series.n_rays),
        phi: Vec::with_capacity(series.n_rays),
    };
    for j in 0..series.n_rays {
        let s = series.ray(j);
        let mean = s.iter().sum::<f64>() / n as f64;
        let re: f64 = s.iter().zip(&cos).map(|(v, c)| v * c).sum();
        let im: f64 = -s.iter().zip(&sin).map(|(v, c)| v * c).sum::<f64>();
        out.a.push(mean);
        out.b.push(2.0 / n as f64 * re.hypot(im));
        out.phi.push(im.atan2(re));
    }
    Ok(out)
}

/// `T = a_s / a_r` and `d = (b_s a_r) / (a_s b_r)`.
pub fn compute_transmission_darkfield(
    a_s: &[f64],
    b_s: &[f64],
    a_r: &[f64],
    b_r: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = a_s.len();
    if b_s.len() != n || a_r.len() != n || b_r.len() != n {
        return Err(Error::shape("amplitude channels differ in length"));
    }
    let mut t = Vec::with_capacity(n);
    let mut d = Vec::with_capacity(n);
    for j in 0..n {
        if !(a_r[j] > 0.0) || !(a_s[j] > 0.0) || !(b_r[j] > 0.0) {
            return Err(Error::invalid(format!("nonpositive denominator at ray {j}")));
        }
        t.push(a_s[j] / a_r[j]);
        d.push(b_s[j] * a_r[j] / (a_s[j] * b_r[j]));
    }
    Ok((t, d))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationConfig {
    /// Reference mean counts.
    pub a0: f64,
    /// Reference visibility.
    pub alpha0: f64,
    pub phase_steps: usize,
    pub noise: bool,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        Self {
            a0: 1e4,
            alpha0: 0.3,
            phase_steps: 8,
            noise: true,
            seed: 0,
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.a0 > 0.0) || !self.a0.is_finite() {
            return Err(Error::invalid(format!("a0 must be positive, got {}", self.a0)));
        }
        if !(self.alpha0 > 0.0 && self.alpha0 < 1.0) {
            return Err(Error::invalid(format!(
                "alpha0 must lie in (0, 1), got {}",
                self.alpha0
            )));
        }
        if self.phase_steps < 3 {
            return Err(Error::invalid("at least 3 phase steps are required"));
        }
        Ok(())
    }
}

/// Random stream of ray `j`.
pub fn ray_rng(seed: u64, j: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(j as u64);
    rng
}

/// One noisy amplitude pair for true mean `a`, true amplitude `b` and `N` steps.
pub fn sample_amplitudes(a: f64, b: f64, phase_steps: usize, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let n = phase_steps as f64;
    let g: f64 = StandardNormal.sample(rng);
    let a_s = a + (a / n).sqrt() * g;
    let sigma = (a / (2.0 * n)).sqrt();
    let x: f64 = StandardNormal.sample(rng);
    let y: f64 = StandardNormal.sample(rng);
    let half_b = (0.5 * b + sigma * x).hypot(sigma * y);
    (a_s, 2.0 * half_b)
}

/// Simulated scan of `phantom`; the series is synthesised when requested.
pub fn simulate_measurements(
    phantom: &Phantom,
    op: &AxdtOperator,
    config: &SimulationConfig,
    with_series: bool,
) -> Result<(MeasurementSet, Option<SteppingSeries>)> {
    config.validate()?;
    check_grid(&phantom.mu_gt.grid, &op.geom)?;
    if phantom.eta_gt.grid != op.geom.grid || phantom.eta_gt.max_degree != op.max_degree() {
        return Err(Error::shape("phantom coefficients do not match the operator"));
    }
    let q = project_raw(&phantom.mu_gt.values, &op.geom);
    let p = op.apply(&phantom.eta_gt.values);
    let (a0, alpha0, n) = (config.a0, config.alpha0, config.phase_steps);
    let (a_s, b_s): (Vec<f64>, Vec<f64>) = q
        .par_iter()
        .zip(p.par_iter())
        .enumerate()
        .map(|(j, (&q, &p))| {
            let a = a0 * (-q).exp();
            let b = a * alpha0 * (-p).exp();
            if config.noise {
                sample_amplitudes(a, b, n, &mut ray_rng(config.seed, j))
            } else {
                (a, b)
            }
        })
        .unzip();
    let n_rays = a_s.len();
    let series = if with_series {
        let phi: Vec<f64> = (0..n_rays).map(|j| (0.37 * j as f64) % (2.0 * PI) - PI).collect();
        Some(synthesize_series(&a_s, &b_s, &phi, n)?)
    } else {
        None
    };
    let det = op.geom.detector();
    let data = MeasurementSet::new(
        op.geom.n_poses(),
        det.rows,
        det.cols,
        n,
        a_s,
        b_s,
        vec![a0; n_rays],
        vec![a0 * alpha0; n_rays],
    )?;
    Ok((data, series))
}
