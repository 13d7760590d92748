//! Parallel-beam X-ray transform with a matched adjoint.
//!
//! Each detector pixel defines a ray `p0 + t * l` in the sample frame. The
//! ray is sampled at `t = i * h` for integer `i` (with `t = 0` on the plane
//! through the grid centre) and `h = 0.5 * min(spacing)`. Every sample
//! interpolates the volume trilinearly between voxel centres and contributes
//! `h` times the interpolated value, so the line integral carries length
//! units. The adjoint scatters with exactly the same samples and weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionGeometry, Pose, ScalarVolume, Vec3, VolumeGrid};
use crate::vecops::{dot, norm};

/// Poses handled by one partial volume during backprojection. Fixed so the
/// reduction order does not depend on the thread count.
pub(crate) const POSE_BLOCK: usize = 8;

/// Default number of power iterations.
pub const DEFAULT_POWER_ITERS: usize = 50;

/// One value per (pose, row, col), pose-major then row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Sinogram {
    pub n_poses: usize,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Sinogram {
    pub fn zeros(geom: &AcquisitionGeometry) -> Self {
        let det = geom.detector();
        Self {
            n_poses: geom.n_poses(),
            rows: det.rows,
            cols: det.cols,
            values: vec![0.0; geom.n_rays()],
        }
    }

    pub fn from_values(geom: &AcquisitionGeometry, values: Vec<f64>) -> Result<Self> {
        if values.len() != geom.n_rays() {
            return Err(Error::shape(format!(
                "sinogram needs {} values, got {}",
                geom.n_rays(),
                values.len()
            )));
        }
        let mut s = Self::zeros(geom);
        s.values = values;
        Ok(s)
    }

    pub fn pixels_per_pose(&self) -> usize {
        self.rows * self.cols
    }

    pub fn pose(&self, p: usize) -> &[f64] {
        let n = self.pixels_per_pose();
        &self.values[p * n..(p + 1) * n]
    }

    pub(crate) fn check_geometry(&self, geom: &AcquisitionGeometry) -> Result<()> {
        let det = geom.detector();
        if self.n_poses != geom.n_poses() || self.rows != det.rows || self.cols != det.cols {
            return Err(Error::shape(format!(
                "sinogram {}x{}x{} does not match geometry {}x{}x{}",
                self.n_poses,
                self.rows,
                self.cols,
                geom.n_poses(),
                det.rows,
                det.cols
            )));
        }
        Ok(())
    }
}

/// A ray expressed in continuous voxel-index coordinates.
struct Ray {
    f0: [f64; 3],
    df: [f64; 3],
    first: i64,
    last: i64,
}

/// Ray-marching step for a grid.
pub fn step_length(grid: &VolumeGrid) -> f64 {
    0.5 * grid.min_spacing()
}

fn pixel_ray(grid: &VolumeGrid, pose: &Pose, row: usize, col: usize, h: f64) -> Option<Ray> {
    let (px, py) = pose.detector.pixel_offset(row, col);
    let p0: Vec3 = grid.center() + pose.world_to_sample(&Vec3::new(px, py, 0.0));
    let l = pose.beam_dir;
    let mut f0 = [0.0; 3];
    let mut df = [0.0; 3];
    let (mut t_lo, mut t_hi) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        f0[a] = (p0[a] - grid.origin[a]) / grid.spacing[a] - 0.5;
        df[a] = h * l[a] / grid.spacing[a];
        // Interpolation support is the open interval (-1, n) in index space.
        let (lo, hi) = (-1.0, grid.dims[a] as f64);
        if df[a].abs() < 1e-300 {
            if f0[a] <= lo || f0[a] >= hi {
                return None;
            }
        } else {
            let (s0, s1) = ((lo - f0[a]) / df[a], (hi - f0[a]) / df[a]);
            t_lo = t_lo.max(s0.min(s1));
            t_hi = t_hi.min(s0.max(s1));
        }
    }
    if t_lo > t_hi {
        return None;
    }
    // Widen by one sample: samples on the boundary have zero weight anyway.
    let first = t_lo.floor() as i64 - 1;
    let last = t_hi.ceil() as i64 + 1;
    Some(Ray { f0, df, first, last })
}

/// Visits every (voxel, weight) pair touched by the ray; weights include the
/// step length.
#[inline]
fn trace<F: FnMut(usize, f64)>(ray: &Ray, grid: &VolumeGrid, h: f64, mut visit: F) {
    let [nx, ny, nz] = grid.dims;
    let (nxi, nyi, nzi) = (nx as i64, ny as i64, nz as i64);
    let sxy = nx * ny;
    for i in ray.first..=ray.last {
        let s = i as f64;
        let fx = ray.f0[0] + s * ray.df[0];
        let fy = ray.f0[1] + s * ray.df[1];
        let fz = ray.f0[2] + s * ray.df[2];
        let (ix, iy, iz) = (fx.floor(), fy.floor(), fz.floor());
        let (wx, wy, wz) = (fx - ix, fy - iy, fz - iz);
        let (ix, iy, iz) = (ix as i64, iy as i64, iz as i64);
        if ix < -1 || iy < -1 || iz < -1 || ix >= nxi || iy >= nyi || iz >= nzi {
            continue;
        }
        let wxs = [h * (1.0 - wx), h * wx];
        let wys = [1.0 - wy, wy];
        let wzs = [1.0 - wz, wz];
        if ix >= 0 && iy >= 0 && iz >= 0 && ix + 1 < nxi && iy + 1 < nyi && iz + 1 < nzi {
            let base = ix as usize + nx * (iy as usize + ny * iz as usize);
            for (dz, wz) in wzs.iter().enumerate() {
                for (dy, wy) in wys.iter().enumerate() {
                    let row = base + dz * sxy + dy * nx;
                    let wyz = wy * wz;
                    visit(row, wxs[0] * wyz);
                    visit(row + 1, wxs[1] * wyz);
                }
            }
        } else {
            for (dz, wz) in wzs.iter().enumerate() {
                let z = iz + dz as i64;
                if z < 0 || z >= nzi {
                    continue;
                }
                for (dy, wy) in wys.iter().enumerate() {
                    let y = iy + dy as i64;
                    if y < 0 || y >= nyi {
                        continue;
                    }
                    for (dx, wx) in wxs.iter().enumerate() {
                        let x = ix + dx as i64;
                        if x < 0 || x >= nxi {
                            continue;
                        }
                        visit(x as usize + nx * (y as usize + ny * z as usize), wx * wy * wz);
                    }
                }
            }
        }
    }
}

/// Projects `values` along every pixel ray of one pose into `out`.
pub fn project_pose(values: &[f64], grid: &VolumeGrid, pose: &Pose, out: &mut [f64]) {
    let det = pose.detector;
    debug_assert_eq!(out.len(), det.n_pixels());
    let h = step_length(grid);
    for row in 0..det.rows {
        for col in 0..det.cols {
            let mut acc = 0.0;
            if let Some(ray) = pixel_ray(grid, pose, row, col, h) {
                trace(&ray, grid, h, |v, w| acc += w * values[v]);
            }
            out[row * det.cols + col] = acc;
        }
    }
}

/// Adds the adjoint of [`project_pose`] applied to `sino_pose` into `out`.
pub fn backproject_pose_into(sino_pose: &[f64], grid: &VolumeGrid, pose: &Pose, out: &mut [f64]) {
    let det = pose.detector;
    debug_assert_eq!(sino_pose.len(), det.n_pixels());
    let h = step_length(grid);
    for row in 0..det.rows {
        for col in 0..det.cols {
            let y = sino_pose[row * det.cols + col];
            if y == 0.0 {
                continue;
            }
            if let Some(ray) = pixel_ray(grid, pose, row, col, h) {
                trace(&ray, grid, h, |v, w| out[v] += w * y);
            }
        }
    }
}

pub(crate) fn check_grid(grid: &VolumeGrid, geom: &AcquisitionGeometry) -> Result<()> {
    if *grid != geom.grid {
        return Err(Error::shape(format!(
            "volume grid {:?} does not match geometry grid {:?}",
            grid, geom.grid
        )));
    }
    Ok(())
}

pub fn project(vol: &ScalarVolume, geom: &AcquisitionGeometry) -> Result<Sinogram> {
    check_grid(&vol.grid, geom)?;
    Ok(Sinogram {
        values: project_raw(&vol.values, geom),
        ..Sinogram::zeros(geom)
    })
}

pub fn backproject(sino: &Sinogram, geom: &AcquisitionGeometry) -> Result<ScalarVolume> {
    sino.check_geometry(geom)?;
    ScalarVolume::from_values(geom.grid, backproject_raw(&sino.values, geom))
}

pub(crate) fn project_raw(values: &[f64], geom: &AcquisitionGeometry) -> Vec<f64> {
    let npix = geom.pixels_per_pose();
    let mut out = vec![0.0; geom.n_rays()];
    out.par_chunks_mut(npix)
        .zip(geom.poses.par_iter())
        .for_each(|(chunk, pose)| project_pose(values, &geom.grid, pose, chunk));
    out
}

pub(crate) fn backproject_raw(sino: &[f64], geom: &AcquisitionGeometry) -> Vec<f64> {
    let npix = geom.pixels_per_pose();
    let nvox = geom.grid.n_voxels();
    let partials: Vec<Vec<f64>> = geom
        .poses
        .par_chunks(POSE_BLOCK)
        .enumerate()
        .map(|(b, poses)| {
            let mut acc = vec![0.0; nvox];
            for (j, pose) in poses.iter().enumerate() {
                let p = b * POSE_BLOCK + j;
                backproject_pose_into(&sino[p * npix..(p + 1) * npix], &geom.grid, pose, &mut acc);
            }
            acc
        })
        .collect();
    reduce_in_order(partials, nvox)
}

pub(crate) fn reduce_in_order(partials: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    let mut iter = partials.into_iter();
    let mut out = iter.next().unwrap_or_else(|| vec![0.0; len]);
    for part in iter {
        out.par_iter_mut().zip(part.par_iter()).for_each(|(o, p)| *o += p);
    }
    out
}

/// A real linear map with an adjoint, acting on flat vectors.
pub trait LinearOperator: Sync {
    fn domain_len(&self) -> usize;
    fn range_len(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Vec<f64>;
    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64>;
}

/// The attenuation transform of a geometry as a [`LinearOperator`].
#[derive(Clone, Debug)]
pub struct XRayTransform {
    pub geom: AcquisitionGeometry,
}

impl XRayTransform {
    pub fn new(geom: AcquisitionGeometry) -> Self {
        Self { geom }
    }
}

impl LinearOperator for XRayTransform {
    fn domain_len(&self) -> usize {
        self.geom.grid.n_voxels()
    }

    fn range_len(&self) -> usize {
        self.geom.n_rays()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        project_raw(x, &self.geom)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        backproject_raw(y, &self.geom)
    }
}

/// Running estimates of `||op||` from power iteration on `op* op`.
///
/// Entry `i` is the best lower bound `||op x_j||` over iterates `j <= i`,
/// hence nondecreasing.
pub fn power_iteration_history(op: &dyn LinearOperator, n_iters: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x: Vec<f64> = (0..op.domain_len()).map(|_| rng.random::<f64>()).collect();
    let mut out = Vec::with_capacity(n_iters);
    let n0 = norm(&x);
    if n0 == 0.0 {
        return vec![0.0; n_iters];
    }
    x.iter_mut().for_each(|v| *v /= n0);
    let mut best = 0.0_f64;
    for _ in 0..n_iters {
        let y = op.apply(&x);
        best = best.max(norm(&y));
        out.push(best);
        let z = op.apply_adjoint(&y);
        let nz = norm(&z);
        if nz == 0.0 || !nz.is_finite() {
            out.resize(n_iters, best);
            break;
        }
        x = z.into_iter().map(|v| v / nz).collect();
    }
    out
}

/// Spectral norm estimate of `op`; 0 for the zero operator.
pub fn power_iteration(op: &dyn LinearOperator, n_iters: usize, seed: u64) -> Result<f64> {
    if n_iters == 0 {
        return Err(Error::invalid("power iteration needs n_iters >= 1"));
    }
    Ok(*power_iteration_history(op, n_iters, seed).last().expect("n_iters >= 1"))
}

/// `<A x, y> - <x, A* y>` relative to `||A x|| ||y||`.
pub fn adjoint_mismatch(op: &dyn LinearOperator, x: &[f64], y: &[f64]) -> f64 {
    let ax = op.apply(x);
    let aty = op.apply_adjoint(y);
    let lhs = dot(&ax, y);
    let rhs = dot(x, &aty);
    let scale = norm(&ax) * norm(y);
    if scale == 0.0 {
        (lhs - rhs).abs()
    } else {
        (lhs - rhs).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{make_pose, sphere_covering_geometry, DetectorSpec};

    struct Diagonal(Vec<f64>);

    impl LinearOperator for Diagonal {
        fn domain_len(&self) -> usize {
            self.0.len()
        }
        fn range_len(&self) -> usize {
            self.0.len()
        }
        fn apply(&self, x: &[f64]) -> Vec<f64> {
            x.iter().zip(&self.0).map(|(a, b)| a * b).collect()
        }
        fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
            self.apply(y)
        }
    }

    #[test]
    fn power_iteration_known_spectra() {
        let est = power_iteration(&Diagonal(vec![3.0, 1.0]), 50, 7).unwrap();
        assert!((est - 3.0).abs() < 1e-10);
        let est = power_iteration(&Diagonal(vec![1.0; 5]), 5, 1).unwrap();
        assert!((est - 1.0).abs() < 1e-14);
        assert_eq!(power_iteration(&Diagonal(vec![0.0; 3]), 10, 1).unwrap(), 0.0);
        assert!(power_iteration(&Diagonal(vec![1.0]), 0, 1).is_err());
    }

    #[test]
    fn power_iteration_is_monotone_and_deterministic() {
        let op = Diagonal(vec![5.0, 4.9, 1.0, 0.3]);
        let h = power_iteration_history(&op, 40, 3);
        assert!(h.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(h, power_iteration_history(&op, 40, 3));
    }

    #[test]
    fn central_axis_ray_through_unit_cube() {
        let grid = VolumeGrid::centered_cube(8, 1.0).unwrap();
        let det = DetectorSpec::new(2, 2, 1.0).unwrap();
        let pose = make_pose(0.0, 0.0, 0.0, det).unwrap();
        let geom = AcquisitionGeometry::new(vec![pose], grid).unwrap();
        let vol = ScalarVolume::from_values(grid, vec![1.0; 512]).unwrap();
        let sino = project(&vol, &geom).unwrap();
        for v in &sino.values {
            assert!((v - 8.0).abs() < 1e-6, "{v}");
        }
    }

    #[test]
    fn zero_in_zero_out_and_mismatch() {
        let grid = VolumeGrid::centered_cube(6, 1.0).unwrap();
        let det = DetectorSpec::covering(&grid, 1.0).unwrap();
        let geom = sphere_covering_geometry(5, det, grid).unwrap();
        let sino = project(&ScalarVolume::zeros(grid), &geom).unwrap();
        assert!(sino.values.iter().all(|&v| v == 0.0));
        let back = backproject(&sino, &geom).unwrap();
        assert!(back.values.iter().all(|&v| v == 0.0));

        let other = VolumeGrid::centered_cube(5, 1.0).unwrap();
        assert!(project(&ScalarVolume::zeros(other), &geom).is_err());
        let mut bad = sino.clone();
        bad.n_poses = 4;
        assert!(backproject(&bad, &geom).is_err());
    }

    #[test]
    fn rays_missing_the_volume_are_zero() {
        let grid = VolumeGrid::centered_cube(4, 1.0).unwrap();
        let det = DetectorSpec::new(1, 1, 1.0).unwrap();
        let mut pose = make_pose(0.0, 0.0, 0.0, det).unwrap();
        pose.detector = DetectorSpec::new(1, 41, 1.0).unwrap();
        let geom = AcquisitionGeometry::new(vec![pose], grid).unwrap();
        let vol = ScalarVolume::from_values(grid, vec![1.0; 64]).unwrap();
        let sino = project(&vol, &geom).unwrap();
        assert_eq!(sino.values[0], 0.0);
        assert!(sino.values[20] > 0.0);
    }
}
