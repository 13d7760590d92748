//! Volumes, detector grids and acquisition poses.
//!
//! World convention: the beam travels along +z, the grating sensitivity
//! (and phase-stepping) direction is +x. A pose's rotation maps sample
//! coordinates to world coordinates; the beam and sensitivity directions are
//! stored in the sample frame because that is where the weighting function is
//! evaluated.

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Orthonormality tolerance for pose invariants.
pub const POSE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl VolumeGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::invalid(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!(
                "grid spacing must be positive, got {spacing:?}"
            )));
        }
        if origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::invalid("grid origin must be finite"));
        }
        Ok(Self { dims, spacing, origin })
    }

    /// Cubic grid of `n^3` voxels centred on the world origin.
    pub fn centered_cube(n: usize, spacing: f64) -> Result<Self> {
        let half = -0.5 * n as f64 * spacing;
        Self::new([n; 3], [spacing; 3], [half; 3])
    }

    pub fn n_voxels(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn extent(&self) -> [f64; 3] {
        [0, 1, 2].map(|a| self.dims[a] as f64 * self.spacing[a])
    }

    pub fn center(&self) -> Vec3 {
        let e = self.extent();
        Vec3::new(
            self.origin[0] + 0.5 * e[0],
            self.origin[1] + 0.5 * e[1],
            self.origin[2] + 0.5 * e[2],
        )
    }

    /// Linear index with x fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    pub fn voxel_center(&self, i: usize, j: usize, k: usize) -> Vec3 {
        Vec3::new(
            self.origin[0] + (i as f64 + 0.5) * self.spacing[0],
            self.origin[1] + (j as f64 + 0.5) * self.spacing[1],
            self.origin[2] + (k as f64 + 0.5) * self.spacing[2],
        )
    }

    /// Voxel centres in storage order.
    pub fn voxel_centers(&self) -> Vec<Vec3> {
        let mut out = Vec::with_capacity(self.n_voxels());
        for k in 0..self.dims[2] {
            for j in 0..self.dims[1] {
                for i in 0..self.dims[0] {
                    out.push(self.voxel_center(i, j, k));
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorSpec {
    pub rows: usize,
    pub cols: usize,
    pub pitch: f64,
}

impl DetectorSpec {
    pub fn new(rows: usize, cols: usize, pitch: f64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("detector must have at least one row and column"));
        }
        if !(pitch > 0.0) || !pitch.is_finite() {
            return Err(Error::invalid(format!("detector pitch must be positive, got {pitch}")));
        }
        Ok(Self { rows, cols, pitch })
    }

    /// Square detector that covers the full projection of `grid` from any
    /// direction at the given pitch.
    pub fn covering(grid: &VolumeGrid, pitch: f64) -> Result<Self> {
        let e = grid.extent();
        let diag = (e[0] * e[0] + e[1] * e[1] + e[2] * e[2]).sqrt();
        let n = (diag / pitch).ceil() as usize;
        Self::new(n, n, pitch)
    }

    pub fn n_pixels(&self) -> usize {
        self.rows * self.cols
    }

    /// World-frame (x, y) offset of a pixel centre from the optical axis.
    #[inline]
    pub fn pixel_offset(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 - 0.5 * (self.cols as f64 - 1.0)) * self.pitch,
            (row as f64 - 0.5 * (self.rows as f64 - 1.0)) * self.pitch,
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pose {
    /// Intrinsic Z-X'-Z'' Euler angles (psi, theta, phi) in radians.
    pub euler: [f64; 3],
    /// Sample-to-world rotation.
    pub rotation: Matrix3<f64>,
    pub detector: DetectorSpec,
    /// Beam direction `l` in the sample frame.
    pub beam_dir: Vec3,
    /// Grating sensitivity direction `t` in the sample frame.
    pub sens_dir: Vec3,
}

/// Rotation for intrinsic Z-X'-Z'' Euler angles.
pub fn euler_zxz(psi: f64, theta: f64, phi: f64) -> Matrix3<f64> {
    let rz1 = Rotation3::from_axis_angle(&Vector3::z_axis(), psi);
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), theta);
    let rz2 = Rotation3::from_axis_angle(&Vector3::z_axis(), phi);
    (rz1 * rx * rz2).into_inner()
}

pub fn make_pose(psi: f64, theta: f64, phi: f64, detector: DetectorSpec) -> Result<Pose> {
    if detector.rows == 0 || detector.cols == 0 {
        return Err(Error::invalid("detector dims must be >= 1"));
    }
    let rotation = euler_zxz(psi, theta, phi);
    let inv = rotation.transpose();
    let pose = Pose {
        euler: [psi, theta, phi],
        rotation,
        detector,
        beam_dir: inv * Vec3::z(),
        sens_dir: inv * Vec3::x(),
    };
    pose.check()?;
    Ok(pose)
}

impl Pose {
    pub fn identity(detector: DetectorSpec) -> Result<Self> {
        make_pose(0.0, 0.0, 0.0, detector)
    }

    /// Verifies the unit-length, orthogonality and rotation invariants.
    pub fn check(&self) -> Result<()> {
        let l = &self.beam_dir;
        let t = &self.sens_dir;
        if (l.norm() - 1.0).abs() > POSE_TOL || (t.norm() - 1.0).abs() > POSE_TOL {
            return Err(Error::invalid("pose directions are not unit vectors"));
        }
        if l.dot(t).abs() > POSE_TOL {
            return Err(Error::invalid("beam and sensitivity directions are not orthogonal"));
        }
        let r = &self.rotation;
        let gram = r.transpose() * r - Matrix3::identity();
        if gram.amax() > POSE_TOL || (r.determinant() - 1.0).abs() > POSE_TOL {
            return Err(Error::invalid("pose rotation is not a proper rotation"));
        }
        Ok(())
    }

    /// Sample-frame coordinates of a world-frame direction.
    pub fn world_to_sample(&self, v: &Vec3) -> Vec3 {
        self.rotation.transpose() * v
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AcquisitionGeometry {
    pub poses: Vec<Pose>,
    pub grid: VolumeGrid,
}

impl AcquisitionGeometry {
    pub fn new(poses: Vec<Pose>, grid: VolumeGrid) -> Result<Self> {
        let first = poses
            .first()
            .ok_or_else(|| Error::invalid("geometry needs at least one pose"))?;
        let (rows, cols) = (first.detector.rows, first.detector.cols);
        if poses.iter().any(|p| p.detector.rows != rows || p.detector.cols != cols) {
            return Err(Error::invalid("all poses must share the detector shape"));
        }
        Ok(Self { poses, grid })
    }

    pub fn n_poses(&self) -> usize {
        self.poses.len()
    }

    pub fn detector(&self) -> DetectorSpec {
        self.poses[0].detector
    }

    pub fn pixels_per_pose(&self) -> usize {
        self.detector().n_pixels()
    }

    pub fn n_rays(&self) -> usize {
        self.n_poses() * self.pixels_per_pose()
    }
}

/// Poses whose beam axes follow a Fibonacci lattice on the sphere; the roll
/// about the beam advances by the golden angle so the sensitivity axes are
/// spread as well.
pub fn sphere_covering_geometry(
    n_poses: usize,
    detector: DetectorSpec,
    grid: VolumeGrid,
) -> Result<AcquisitionGeometry> {
    if n_poses == 0 {
        return Err(Error::invalid("n_poses must be >= 1"));
    }
    if n_poses == 1 {
        return AcquisitionGeometry::new(vec![Pose::identity(detector)?], grid);
    }
    let golden = std::f64::consts::PI * (3.0 - 5.0_f64.sqrt());
    let poses = (0..n_poses)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / n_poses as f64;
            let azimuth = golden * i as f64;
            let rho = (1.0 - z * z).max(0.0).sqrt();
            let l = Vec3::new(rho * azimuth.cos(), rho * azimuth.sin(), z);
            // With R = Rz(psi) Rx(theta) Rz(phi): R^T e_z = (sin t sin p, sin t cos p, cos t).
            let theta = l.z.clamp(-1.0, 1.0).acos();
            let phi = l.x.atan2(l.y);
            let psi = (golden * 0.5 * i as f64).rem_euclid(2.0 * std::f64::consts::PI);
            make_pose(psi, theta, phi, detector)
        })
        .collect::<Result<Vec<_>>>()?;
    AcquisitionGeometry::new(poses, grid)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume {
    pub grid: VolumeGrid,
    pub values: Vec<f64>,
}

impl ScalarVolume {
    pub fn zeros(grid: VolumeGrid) -> Self {
        Self {
            values: vec![0.0; grid.n_voxels()],
            grid,
        }
    }

    pub fn from_values(grid: VolumeGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_voxels() {
            return Err(Error::shape(format!(
                "expected {} voxels, got {}",
                grid.n_voxels(),
                values.len()
            )));
        }
        Ok(Self { grid, values })
    }
}

/// Even-degree real spherical-harmonic terms `(k, m)` up to `max_degree`,
/// ordered lexicographically with `m = -k..=k`.
pub fn even_sh_terms(max_degree: usize) -> Vec<(usize, i64)> {
    (0..=max_degree)
        .step_by(2)
        .flat_map(|k| (-(k as i64)..=k as i64).map(move |m| (k, m)))
        .collect()
}

pub fn n_even_coefficients(max_degree: usize) -> usize {
    (0..=max_degree).step_by(2).map(|k| 2 * k + 1).sum()
}

/// Per-voxel spherical-harmonic coefficients.
///
/// Stored coefficient-major: `values[c * n_voxels + voxel]`, each plane in
/// x-fastest order, coefficients ordered as [`even_sh_terms`].
#[derive(Clone, Debug, PartialEq)]
pub struct CoefficientVolume {
    pub grid: VolumeGrid,
    pub max_degree: usize,
    pub values: Vec<f64>,
}

impl CoefficientVolume {
    pub fn zeros(grid: VolumeGrid, max_degree: usize) -> Result<Self> {
        check_even_degree(max_degree)?;
        Ok(Self {
            values: vec![0.0; n_even_coefficients(max_degree) * grid.n_voxels()],
            grid,
            max_degree,
        })
    }

    pub fn from_values(grid: VolumeGrid, max_degree: usize, values: Vec<f64>) -> Result<Self> {
        check_even_degree(max_degree)?;
        let expected = n_even_coefficients(max_degree) * grid.n_voxels();
        if values.len() != expected {
            return Err(Error::shape(format!(
                "expected {expected} coefficient values, got {}",
                values.len()
            )));
        }
        Ok(Self {
            grid,
            max_degree,
            values,
        })
    }

    pub fn n_coefficients(&self) -> usize {
        n_even_coefficients(self.max_degree)
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..=self.max_degree).step_by(2).collect()
    }

    pub fn terms(&self) -> Vec<(usize, i64)> {
        even_sh_terms(self.max_degree)
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.grid.n_voxels();
        &self.values[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.grid.n_voxels();
        &mut self.values[c * n..(c + 1) * n]
    }

    /// All coefficients of one voxel.
    pub fn voxel(&self, v: usize) -> Vec<f64> {
        let n = self.grid.n_voxels();
        (0..self.n_coefficients()).map(|c| self.values[c * n + v]).collect()
    }

    pub fn set_voxel(&mut self, v: usize, coeffs: &[f64]) {
        let n = self.grid.n_voxels();
        for (c, &x) in coeffs.iter().enumerate() {
            self.values[c * n + v] = x;
        }
    }
}

fn check_even_degree(max_degree: usize) -> Result<()> {
    if !max_degree.is_multiple_of(2) {
        return Err(Error::invalid(format!("maximum degree must be even, got {max_degree}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det() -> DetectorSpec {
        DetectorSpec::new(4, 4, 1.0).unwrap()
    }

    #[test]
    fn identity_pose_axes() {
        let p = make_pose(0.0, 0.0, 0.0, det()).unwrap();
        assert_eq!(p.beam_dir, Vec3::z());
        assert_eq!(p.sens_dir, Vec3::x());
    }

    #[test]
    fn roll_about_beam_moves_sensitivity_to_y() {
        let p = make_pose(std::f64::consts::FRAC_PI_2, 0.0, 0.0, det()).unwrap();
        assert!((p.beam_dir - Vec3::z()).norm() < 1e-15);
        assert!((p.sens_dir.abs() - Vec3::y()).norm() < 1e-15);
    }

    #[test]
    fn generic_pose_is_orthonormal() {
        let p = make_pose(0.3, 1.1, -0.7, det()).unwrap();
        // Direct construction of the rotation matrices as an independent check.
        let (c1, s1) = (0.3_f64.cos(), 0.3_f64.sin());
        let (c2, s2) = (1.1_f64.cos(), 1.1_f64.sin());
        let (c3, s3) = ((-0.7_f64).cos(), (-0.7_f64).sin());
        let rz1 = Matrix3::new(c1, -s1, 0.0, s1, c1, 0.0, 0.0, 0.0, 1.0);
        let rx = Matrix3::new(1.0, 0.0, 0.0, 0.0, c2, -s2, 0.0, s2, c2);
        let rz2 = Matrix3::new(c3, -s3, 0.0, s3, c3, 0.0, 0.0, 0.0, 1.0);
        let r = rz1 * rx * rz2;
        assert!((r - p.rotation).amax() < 1e-15);
        assert!((p.beam_dir.norm() - 1.0).abs() < 1e-12);
        assert!((p.sens_dir.norm() - 1.0).abs() < 1e-12);
        assert!(p.beam_dir.dot(&p.sens_dir).abs() < 1e-12);
    }

    #[test]
    fn angles_wrap() {
        let a = make_pose(0.3, 1.1, -0.7, det()).unwrap();
        let tau = 2.0 * std::f64::consts::PI;
        let b = make_pose(0.3 + tau, 1.1 - tau, -0.7 + 2.0 * tau, det()).unwrap();
        assert!((a.rotation - b.rotation).amax() < 1e-12);
    }

    #[test]
    fn single_pose_geometry_is_identity() {
        let grid = VolumeGrid::centered_cube(4, 1.0).unwrap();
        let g = sphere_covering_geometry(1, det(), grid).unwrap();
        assert_eq!(g.n_poses(), 1);
        assert_eq!(g.poses[0].rotation, Matrix3::identity());
    }

    #[test]
    fn covering_geometry_spreads_beam_directions() {
        let grid = VolumeGrid::centered_cube(4, 1.0).unwrap();
        let g = sphere_covering_geometry(100, det(), grid).unwrap();
        let mut min_angle = f64::INFINITY;
        for (i, a) in g.poses.iter().enumerate() {
            a.check().unwrap();
            for b in &g.poses[i + 1..] {
                let c = a.beam_dir.dot(&b.beam_dir).clamp(-1.0, 1.0);
                min_angle = min_angle.min(c.acos());
            }
        }
        assert!(min_angle > 0.0);
        let mean: Vec3 = g.poses.iter().map(|p| p.beam_dir).sum::<Vec3>() / 100.0;
        assert!(mean.norm() < 0.2);
        let again = sphere_covering_geometry(100, det(), grid).unwrap();
        assert_eq!(g, again);
    }

    #[test]
    fn invalid_inputs() {
        assert!(VolumeGrid::new([0, 1, 1], [1.0; 3], [0.0; 3]).is_err());
        assert!(VolumeGrid::new([1, 1, 1], [1.0, -1.0, 1.0], [0.0; 3]).is_err());
        assert!(DetectorSpec::new(0, 3, 1.0).is_err());
        assert!(sphere_covering_geometry(0, det(), VolumeGrid::centered_cube(2, 1.0).unwrap()).is_err());
        assert!(CoefficientVolume::zeros(VolumeGrid::centered_cube(2, 1.0).unwrap(), 3).is_err());
    }

    #[test]
    fn coefficient_layout() {
        assert_eq!(n_even_coefficients(4), 15);
        let terms = even_sh_terms(4);
        assert_eq!(terms[0], (0, 0));
        assert_eq!(terms[1], (2, -2));
        assert_eq!(terms[5], (2, 2));
        assert_eq!(terms[6], (4, -4));
        assert_eq!(terms[14], (4, 4));
    }
}
