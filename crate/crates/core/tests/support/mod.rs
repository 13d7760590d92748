//! Shared synthetic setups for the integration tests.
#![allow(dead_code)]

use axdt::geometry::{sphere_covering_geometry, AcquisitionGeometry, DetectorSpec, VolumeGrid};
use axdt::models::Objective;
use axdt::simulate::{make_crossed_rods_phantom, CrossedRods, Phantom};
use axdt::sphharm::AxdtOperator;
use axdt::LinearOperator;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Setup {
    pub grid: VolumeGrid,
    pub rods: CrossedRods,
    pub phantom: Phantom,
    pub geom: AcquisitionGeometry,
    pub op: AxdtOperator,
}

/// Crossed rods of radius `n/6` in an `n^3` unit-spacing cube, scanned with
/// `poses` poses at detector pitch `pitch`; `strength` scales both
/// scattering parameters of the default rods.
pub fn setup(n: usize, poses: usize, pitch: f64, strength: f64) -> Setup {
    let grid = VolumeGrid::centered_cube(n, 1.0).unwrap();
    let base = CrossedRods::default();
    let rods = CrossedRods {
        rod_radius: n as f64 / 6.0,
        eps_iso: base.eps_iso * strength,
        eps_aniso: base.eps_aniso * strength,
        ..base
    };
    let phantom = make_crossed_rods_phantom(grid, &rods).unwrap();
    let det = DetectorSpec::covering(&grid, pitch).unwrap();
    let geom = sphere_covering_geometry(poses, det, grid).unwrap();
    let op = AxdtOperator::with_quadrature(geom.clone(), 3, 4).unwrap();
    Setup {
        grid,
        rods,
        phantom,
        geom,
        op,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Random coefficients around a scaled copy of the phantom with `B eta >= 0`
/// on every ray.
pub fn feasible_eta(s: &Setup, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let nv = s.grid.n_voxels();
    let scale = rng.random_range(0.3..1.5);
    loop {
        let mut eta: Vec<f64> = s.phantom.eta_gt.values.iter().map(|v| scale * v).collect();
        for (c, v) in eta.iter_mut().enumerate() {
            *v += if c < nv {
                rng.random_range(0.0..0.05)
            } else {
                rng.random_range(-0.005..0.005)
            };
        }
        if s.op.apply(&eta).iter().all(|&p| p >= 0.0) {
            return eta;
        }
    }
}

/// Random attenuation around the phantom, nonnegative everywhere.
pub fn feasible_mu(s: &Setup, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let scale = rng.random_range(0.3..1.5);
    s.phantom
        .mu_gt
        .values
        .iter()
        .map(|v| scale * v + rng.random_range(0.0..0.005))
        .collect()
}

/// Fourth-order central difference of `f` along `v`.
pub fn directional_fd(f: &dyn Fn(&[f64]) -> f64, x: &[f64], v: &[f64], h: f64) -> f64 {
    let at = |t: f64| {
        let y: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + t * b).collect();
        f(&y)
    };
    (-at(2.0 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2.0 * h)) / (12.0 * h)
}

/// Fourth-order central difference of a vector function along `v`.
pub fn vector_fd(f: &dyn Fn(&[f64]) -> Vec<f64>, x: &[f64], v: &[f64], h: f64) -> Vec<f64> {
    let at = |t: f64| {
        let y: Vec<f64> = x.iter().zip(v).map(|(a, b)| a + t * b).collect();
        f(&y)
    };
    let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
    (0..x.len())
        .map(|i| (-p2[i] + 8.0 * p1[i] - 8.0 * m1[i] + m2[i]) / (12.0 * h))
        .collect()
}

/// Hessian of an objective at a fixed point, as a linear operator.
pub struct Hessian<'a> {
    pub model: &'a dyn Objective,
    pub x: Vec<f64>,
}

impl LinearOperator for Hessian<'_> {
    fn domain_len(&self) -> usize {
        self.x.len()
    }
    fn range_len(&self) -> usize {
        self.x.len()
    }
    fn apply(&self, v: &[f64]) -> Vec<f64> {
        self.model.hessvec(&self.x, v)
    }
    fn apply_adjoint(&self, v: &[f64]) -> Vec<f64> {
        self.model.hessvec(&self.x, v)
    }
}

/// Voxels outside both rods.
pub fn background_mask(p: &Phantom) -> Vec<bool> {
    p.fiber_gt.iter().map(Option::is_none).collect()
}
