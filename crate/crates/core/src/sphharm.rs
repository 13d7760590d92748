//! Real spherical harmonics, sphere quadrature, pose weights and the AXDT
//! operator.
//!
//! The basis is the orthonormal real basis without the Condon-Shortley phase:
//! `Y_k^m ~ P_k^|m|(z) cos(m phi)` for `m > 0` and `~ sin(|m| phi)` for
//! `m < 0`. Evaluation works directly on Cartesian components so the poles
//! need no special casing.
//!
//! For a pose with beam `l` and sensitivity `t` the weights are
//! `w_k^m = 1/(4 pi) * integral h(u) Y_k^m(u) du` with
//! `h(u) = (|l x u| <u, t>)^2`, and the forward operator is
//! `(B eta)(pose, pixel) = sum_{k,m} w_k^m(pose) [A eta_k^m](pose, pixel)`.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{even_sh_terms, n_even_coefficients, AcquisitionGeometry, CoefficientVolume, Pose, Vec3};
use crate::projector::{
    backproject_pose_into, check_grid, project_pose, reduce_in_order, LinearOperator, Sinogram, POSE_BLOCK,
};

/// Truncation degree used throughout.
pub const DEFAULT_MAX_DEGREE: usize = 4;

/// Icosphere level for weight quadrature (642 nodes).
pub const DEFAULT_QUADRATURE_LEVEL: usize = 3;

/// Highest degree integrated exactly by corrected grids (level >= 2).
pub const EXACT_DEGREE: usize = 8;

fn factorial_ratio(k: usize, m: usize) -> f64 {
    // (k - m)! / (k + m)!
    ((k - m + 1)..=(k + m)).fold(1.0, |acc, j| acc / j as f64)
}

/// Evaluates all real harmonics of degree `<= max_degree` at unit `u`,
/// ordered `(0,0), (1,-1), (1,0), (1,1), (2,-2), ...`.
pub fn real_sh_all(max_degree: usize, u: &Vec3) -> Vec<f64> {
    let (x, y, z) = (u.x, u.y, u.z);
    let l = max_degree;
    // pbar[k][m]: associated Legendre P_k^m(z) / (1 - z^2)^(m/2), no CS phase.
    let mut pbar = vec![vec![0.0; l + 1]; l + 1];
    let mut pmm = 1.0;
    for m in 0..=l {
        if m > 0 {
            pmm *= (2 * m - 1) as f64;
        }
        pbar[m][m] = pmm;
        if m < l {
            pbar[m + 1][m] = z * (2 * m + 1) as f64 * pmm;
        }
        for k in (m + 2)..=l {
            pbar[k][m] =
                ((2 * k - 1) as f64 * z * pbar[k - 1][m] - (k + m - 1) as f64 * pbar[k - 2][m]) / (k - m) as f64;
        }
    }
    // (x + i y)^m = rho^m (cos m phi + i sin m phi)
    let mut cs = vec![(1.0, 0.0); l + 1];
    for m in 1..=l {
        let (c, s) = cs[m - 1];
        cs[m] = (c * x - s * y, c * y + s * x);
    }
    let mut out = Vec::with_capacity((l + 1) * (l + 1));
    for k in 0..=l {
        for m in -(k as i64)..=(k as i64) {
            let am = m.unsigned_abs() as usize;
            let norm = ((2 * k + 1) as f64 / (4.0 * PI) * factorial_ratio(k, am)).sqrt();
            let v = if m == 0 {
                norm * pbar[k][0]
            } else if m > 0 {
                2f64.sqrt() * norm * pbar[k][am] * cs[am].0
            } else {
                2f64.sqrt() * norm * pbar[k][am] * cs[am].1
            };
            out.push(v);
        }
    }
    out
}

/// Index of `(k, m)` in [`real_sh_all`] output.
pub fn full_index(k: usize, m: i64) -> usize {
    k * k + (m + k as i64) as usize
}

/// Real orthonormal spherical harmonic `Y_k^m(u)`.
pub fn eval_real_sh(k: usize, m: i64, u: &Vec3) -> Result<f64> {
    if m.unsigned_abs() as usize > k {
        return Err(Error::invalid(format!("invalid harmonic (k={k}, m={m})")));
    }
    let n = u.norm();
    if (n - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("direction must be unit length, |u| = {n}")));
    }
    Ok(real_sh_all(k, u)[full_index(k, m)])
}

/// Even-degree harmonics up to `max_degree` in coefficient order.
pub fn even_sh_values(max_degree: usize, u: &Vec3) -> Vec<f64> {
    let all = real_sh_all(max_degree, u);
    even_sh_terms(max_degree)
        .into_iter()
        .map(|(k, m)| all[full_index(k, m)])
        .collect()
}

/// Icosphere nodes with quadrature weights and the mesh adjacency.
#[derive(Clone, Debug)]
pub struct SphereGrid {
    pub level: usize,
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
    pub neighbors: Vec<Vec<usize>>,
}

impl SphereGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(&Vec3) -> f64) -> f64 {
        self.nodes.iter().zip(&self.weights).map(|(u, w)| w * f(u)).sum()
    }

    /// Quadrature projection of `f` onto even harmonics `<= max_degree`.
    pub fn project_even(&self, max_degree: usize, f: impl Fn(&Vec3) -> f64) -> Vec<f64> {
        let mut out = vec![0.0; n_even_coefficients(max_degree)];
        for (u, w) in self.nodes.iter().zip(&self.weights) {
            let fu = w * f(u);
            for (o, y) in out.iter_mut().zip(even_sh_values(max_degree, u)) {
                *o += fu * y;
            }
        }
        out
    }
}

/// Icosahedron subdivided `level` times, `10 * 4^level + 2` nodes.
///
/// Level 0 and 1 carry equal weights `4 pi / n` (exact through degree 5 by
/// icosahedral symmetry). From level 2 on, the weights receive the
/// minimum-norm correction that makes every harmonic of degree
/// `<= EXACT_DEGREE` integrate exactly; equal weights alone leave an O(0.1)
/// error on the degree-6 invariant that does not shrink with refinement.
pub fn sphere_grid(level: usize) -> SphereGrid {
    let (nodes, faces) = icosphere(level);
    let mut edges: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); nodes.len()];
    for f in &faces {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            edges[a].insert(b);
            edges[b].insert(a);
        }
    }
    let neighbors = edges.into_iter().map(|s| s.into_iter().collect()).collect();
    let n = nodes.len();
    let mut weights = vec![4.0 * PI / n as f64; n];
    if level >= 2 {
        correct_weights(&nodes, &mut weights);
    }
    SphereGrid {
        level,
        nodes,
        weights,
        neighbors,
    }
}

fn correct_weights(nodes: &[Vec3], weights: &mut [f64]) {
    let nb = (EXACT_DEGREE + 1) * (EXACT_DEGREE + 1);
    let n = nodes.len();
    let mut phi = DMatrix::zeros(nb, n);
    for (j, u) in nodes.iter().enumerate() {
        for (i, y) in real_sh_all(EXACT_DEGREE, u).into_iter().enumerate() {
            phi[(i, j)] = y;
        }
    }
    let w0 = nalgebra::DVector::from_column_slice(weights);
    let mut target = nalgebra::DVector::zeros(nb);
    target[0] = (4.0 * PI).sqrt();
    let residual = &target - &phi * &w0;
    let gram = &phi * phi.transpose();
    let lambda = gram
        .svd(true, true)
        .solve(&residual, 1e-12)
        .expect("SVD solve with both factors");
    let w = w0 + phi.transpose() * lambda;
    weights.copy_from_slice(w.as_slice());
}

fn icosphere(level: usize) -> (Vec<Vec3>, Vec<[usize; 3]>) {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, t, 0.0),
        (1.0, t, 0.0),
        (-1.0, -t, 0.0),
        (1.0, -t, 0.0),
        (0.0, -1.0, t),
        (0.0, 1.0, t),
        (0.0, -1.0, -t),
        (0.0, 1.0, -t),
        (t, 0.0, -1.0),
        (t, 0.0, 1.0),
        (-t, 0.0, -1.0),
        (-t, 0.0, 1.0),
    ];
    let mut nodes: Vec<Vec3> = raw.iter().map(|&(x, y, z)| Vec3::new(x, y, z).normalize()).collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..level {
        let mut cache = std::collections::HashMap::new();
        let mut midpoint = |a: usize, b: usize, nodes: &mut Vec<Vec3>| -> usize {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                nodes.push((nodes[a] + nodes[b]).normalize());
                nodes.len() - 1
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for [a, b, c] in faces {
            let ab = midpoint(a, b, &mut nodes);
            let bc = midpoint(b, c, &mut nodes);
            let ca = midpoint(c, a, &mut nodes);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    (nodes, faces)
}

/// The weighting function `h(u, t, l) = (|l x u| <u, t>)^2`.
#[inline]
pub fn scattering_weight(u: &Vec3, sens: &Vec3, beam: &Vec3) -> f64 {
    let c = beam.cross(u).norm() * u.dot(sens);
    c * c
}

/// Per-pose weights `w_k^m`, one row of coefficients per pose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseWeights {
    pub max_degree: usize,
    pub n_coefficients: usize,
    /// `values[pose * n_coefficients + c]`
    pub values: Vec<f64>,
}

impl PoseWeights {
    pub fn n_poses(&self) -> usize {
        self.values.len() / self.n_coefficients
    }

    pub fn pose(&self, p: usize) -> &[f64] {
        &self.values[p * self.n_coefficients..(p + 1) * self.n_coefficients]
    }
}

/// Weights of a single pose.
pub fn compute_pose_weights(pose: &Pose, grid: &SphereGrid, max_degree: usize) -> Result<Vec<f64>> {
    if !max_degree.is_multiple_of(2) {
        return Err(Error::invalid("maximum degree must be even"));
    }
    let (t, l) = (pose.sens_dir, pose.beam_dir);
    let mut w = grid.project_even(max_degree, |u| scattering_weight(u, &t, &l));
    w.iter_mut().for_each(|v| *v /= 4.0 * PI);
    if let Some(bad) = w.iter().find(|v| !(v.abs() < 1.0)) {
        return Err(Error::invalid(format!("pose weight {bad} violates |w| < 1")));
    }
    Ok(w)
}

pub fn compute_all_weights(geom: &AcquisitionGeometry, grid: &SphereGrid, max_degree: usize) -> Result<PoseWeights> {
    let rows: Vec<Vec<f64>> = geom
        .poses
        .par_iter()
        .map(|p| compute_pose_weights(p, grid, max_degree))
        .collect::<Result<_>>()?;
    Ok(PoseWeights {
        max_degree,
        n_coefficients: n_even_coefficients(max_degree),
        values: rows.concat(),
    })
}

/// The AXDT forward operator for one geometry and weight set.
#[derive(Clone, Debug)]
pub struct AxdtOperator {
    pub geom: AcquisitionGeometry,
    pub weights: PoseWeights,
}

impl AxdtOperator {
    pub fn new(geom: AcquisitionGeometry, weights: PoseWeights) -> Result<Self> {
        if weights.n_poses() != geom.n_poses() {
            return Err(Error::invalid(format!(
                "weights cover {} poses, geometry has {}",
                weights.n_poses(),
                geom.n_poses()
            )));
        }
        Ok(Self { geom, weights })
    }

    /// Builds the operator with freshly computed weights.
    pub fn with_quadrature(geom: AcquisitionGeometry, level: usize, max_degree: usize) -> Result<Self> {
        let weights = compute_all_weights(&geom, &sphere_grid(level), max_degree)?;
        Self::new(geom, weights)
    }

    pub fn max_degree(&self) -> usize {
        self.weights.max_degree
    }

    pub fn n_coefficients(&self) -> usize {
        self.weights.n_coefficients
    }

    pub fn forward(&self, eta: &CoefficientVolume) -> Result<Sinogram> {
        check_grid(&eta.grid, &self.geom)?;
        if eta.max_degree != self.max_degree() {
            return Err(Error::shape("coefficient degree does not match the weights"));
        }
        Sinogram::from_values(&self.geom, self.forward_raw(&eta.values))
    }

    pub fn adjoint(&self, sino: &Sinogram) -> Result<CoefficientVolume> {
        sino.check_geometry(&self.geom)?;
        CoefficientVolume::from_values(self.geom.grid, self.max_degree(), self.adjoint_raw(&sino.values))
    }

    pub(crate) fn forward_raw(&self, eta: &[f64]) -> Vec<f64> {
        let nvox = self.geom.grid.n_voxels();
        let npix = self.geom.pixels_per_pose();
        let nc = self.n_coefficients();
        let mut out = vec![0.0; self.geom.n_rays()];
        out.par_chunks_mut(npix)
            .zip(self.geom.poses.par_iter())
            .enumerate()
            .for_each_init(
                || vec![0.0; nvox],
                |combined, (p, (chunk, pose))| {
                    let w = self.weights.pose(p);
                    combined.iter_mut().for_each(|v| *v = 0.0);
                    for c in 0..nc {
                        let wc = w[c];
                        if wc == 0.0 {
                            continue;
                        }
                        let plane = &eta[c * nvox..(c + 1) * nvox];
                        combined.iter_mut().zip(plane).for_each(|(o, e)| *o += wc * e);
                    }
                    project_pose(combined, &self.geom.grid, pose, chunk);
                },
            );
        out
    }

    pub(crate) fn adjoint_raw(&self, sino: &[f64]) -> Vec<f64> {
        let nvox = self.geom.grid.n_voxels();
        let npix = self.geom.pixels_per_pose();
        let nc = self.n_coefficients();
        let partials: Vec<Vec<f64>> = self
            .geom
            .poses
            .par_chunks(POSE_BLOCK)
            .enumerate()
            .map(|(b, poses)| {
                let mut acc = vec![0.0; nc * nvox];
                let mut back = vec![0.0; nvox];
                for (j, pose) in poses.iter().enumerate() {
                    let p = b * POSE_BLOCK + j;
                    back.iter_mut().for_each(|v| *v = 0.0);
                    backproject_pose_into(&sino[p * npix..(p + 1) * npix], &self.geom.grid, pose, &mut back);
                    let w = self.weights.pose(p);
                    for c in 0..nc {
                        let wc = w[c];
                        acc[c * nvox..(c + 1) * nvox]
                            .iter_mut()
                            .zip(&back)
                            .for_each(|(o, v)| *o += wc * v);
                    }
                }
                acc
            })
            .collect();
        reduce_in_order(partials, nc * nvox)
    }
}

impl LinearOperator for AxdtOperator {
    fn domain_len(&self) -> usize {
        self.n_coefficients() * self.geom.grid.n_voxels()
    }

    fn range_len(&self) -> usize {
        self.geom.n_rays()
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.forward_raw(x)
    }

    fn apply_adjoint(&self, y: &[f64]) -> Vec<f64> {
        self.adjoint_raw(y)
    }
}

/// Bounds on `||B||` derived from `||A||`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct BNormBound {
    /// `K / (4 pi) * ||A||`.
    pub nominal_bound: f64,
    /// `(sum_{k even <= K} (2k + 1)) / (4 pi) * ||A||`.
    pub safe_bound: f64,
}

/// Multiplier applied to power-iteration estimates of `||A||`, which
/// approach the true norm from below.
pub const ANORM_SAFETY: f64 = 1.05;

pub fn bnorm_bound(anorm: f64, max_degree: usize) -> Result<BNormBound> {
    if !(anorm > 0.0) || !anorm.is_finite() {
        return Err(Error::invalid(format!("operator norm must be positive, got {anorm}")));
    }
    Ok(BNormBound {
        nominal_bound: max_degree as f64 / (4.0 * PI) * anorm,
        safe_bound: n_even_coefficients(max_degree) as f64 / (4.0 * PI) * anorm,
    })
}
