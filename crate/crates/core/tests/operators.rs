mod support;

use std::f64::consts::FRAC_PI_2;

use axdt::geometry::{make_pose, sphere_covering_geometry, CoefficientVolume, DetectorSpec, Pose, Vec3, VolumeGrid};
use axdt::models::estimate_anorm;
use axdt::projector::{power_iteration, step_length, XRayTransform};
use axdt::simulate::rod_coefficients;
use axdt::sphharm::{bnorm_bound, compute_pose_weights, sphere_grid};
use axdt::vecops::{dot, norm};
use axdt::{AcquisitionGeometry, AxdtOperator, LinearOperator};
use nalgebra::DMatrix;
use proptest::prelude::*;
use support::*;

/// Trilinear value of voxel `v`'s hat function at world point `x`.
fn hat(grid: &VolumeGrid, v: [usize; 3], x: &Vec3) -> f64 {
    (0..3)
        .map(|a| {
            let c = grid.origin[a] + (v[a] as f64 + 0.5) * grid.spacing[a];
            (1.0 - (x[a] - c).abs() / grid.spacing[a]).max(0.0)
        })
        .product()
}

/// Dense row of the projector for one ray: samples `p0 + s h l` for every
/// integer `s` whose point can touch the volume.
fn reference_row(grid: &VolumeGrid, pose: &Pose, row: usize, col: usize) -> Vec<f64> {
    let (px, py) = pose.detector.pixel_offset(row, col);
    let p0 = grid.center() + pose.rotation.transpose() * Vec3::new(px, py, 0.0);
    let l = pose.beam_dir;
    let h = 0.5 * grid.spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let ext = grid.extent();
    let reach = ((ext[0].powi(2) + ext[1].powi(2) + ext[2].powi(2)).sqrt() / h).ceil() as i64 + 4;
    let [nx, ny, nz] = grid.dims;
    let mut out = vec![0.0; grid.n_voxels()];
    for s in -reach..=reach {
        let x = p0 + (s as f64 * h) * l;
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let w = hat(grid, [i, j, k], &x);
                    if w > 0.0 {
                        out[grid.index(i, j, k)] += h * w;
                    }
                }
            }
        }
    }
    out
}

fn reference_matrix(geom: &AcquisitionGeometry) -> DMatrix<f64> {
    let det = geom.detector();
    let nv = geom.grid.n_voxels();
    let mut m = DMatrix::zeros(geom.n_rays(), nv);
    let mut r = 0;
    for pose in &geom.poses {
        for row in 0..det.rows {
            for col in 0..det.cols {
                let dense = reference_row(&geom.grid, pose, row, col);
                for (v, w) in dense.iter().enumerate() {
                    m[(r, v)] = *w;
                }
                r += 1;
            }
        }
    }
    m
}

fn small_geometry(poses: usize) -> AcquisitionGeometry {
    let grid = VolumeGrid::centered_cube(8, 1.0).unwrap();
    sphere_covering_geometry(poses, DetectorSpec::covering(&grid, 1.0).unwrap(), grid).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn projector_matches_dense_reference() {
    let geom = small_geometry(5);
    let xr = XRayTransform::new(geom.clone());
    let m = reference_matrix(&geom);
    let mut rng = rng(1);
    let x = uniform(&mut rng, geom.grid.n_voxels(), 0.0, 1.0);
    let dense: Vec<f64> = (&m * nalgebra::DVector::from_vec(x.clone())).iter().copied().collect();
    assert!(max_abs_diff(&xr.apply(&x), &dense) < 1e-8);

    let y = uniform(&mut rng, geom.n_rays(), -1.0, 1.0);
    let dense_t: Vec<f64> = (m.transpose() * nalgebra::DVector::from_vec(y.clone()))
        .iter()
        .copied()
        .collect();
    assert!(max_abs_diff(&xr.apply_adjoint(&y), &dense_t) < 1e-8);

    // Single pixel backprojection: support equals the reference row.
    let j = geom.pixels_per_pose() / 2 + geom.detector().cols / 2;
    let mut e = vec![0.0; geom.n_rays()];
    e[j] = 1.0;
    let bp = xr.apply_adjoint(&e);
    for v in 0..bp.len() {
        assert_eq!(bp[v].abs() > 1e-12, m[(j, v)].abs() > 1e-12, "voxel {v}");
        assert!((bp[v] - m[(j, v)]).abs() < 1e-12);
    }
    assert!(bp.iter().any(|&w| w > 0.0));
}

#[test]
fn operator_norm_matches_dense_svd() {
    let geom = small_geometry(6);
    let m = reference_matrix(&geom);
    let sigma = m.singular_values().max();
    let est = power_iteration(&XRayTransform::new(geom.clone()), 100, 3).unwrap();
    assert!(est <= sigma * (1.0 + 1e-9));
    assert!((est - sigma).abs() < 0.01 * sigma, "{est} vs {sigma}");
    let inflated = estimate_anorm(&geom, 100, 3).unwrap();
    assert!(inflated >= sigma);
}

#[test]
fn axdt_operator_matches_dense_assembly() {
    let geom = small_geometry(4);
    let op = AxdtOperator::with_quadrature(geom.clone(), 3, 4).unwrap();
    let m = reference_matrix(&geom);
    let nv = geom.grid.n_voxels();
    let npix = geom.pixels_per_pose();
    let nc = 15;
    // Dense B: block (pose p, coefficient c) = w[p][c] * A_p.
    let mut b = DMatrix::zeros(geom.n_rays(), nc * nv);
    for (p, pose) in geom.poses.iter().enumerate() {
        let w = compute_pose_weights(pose, &sphere_grid(3), 4).unwrap();
        for r in p * npix..(p + 1) * npix {
            for c in 0..nc {
                for v in 0..nv {
                    b[(r, c * nv + v)] = w[c] * m[(r, v)];
                }
            }
        }
    }
    let mut rng = rng(2);
    let eta = uniform(&mut rng, nc * nv, -1.0, 1.0);
    let dense: Vec<f64> = (&b * nalgebra::DVector::from_vec(eta.clone()))
        .iter()
        .copied()
        .collect();
    assert!(max_abs_diff(&op.apply(&eta), &dense) < 1e-8);
    let y = uniform(&mut rng, geom.n_rays(), -1.0, 1.0);
    let dense_t: Vec<f64> = (b.transpose() * nalgebra::DVector::from_vec(y.clone()))
        .iter()
        .copied()
        .collect();
    assert!(max_abs_diff(&op.apply_adjoint(&y), &dense_t) < 1e-8);
}

#[test]
fn axdt_norm_below_safe_bound_on_16_cube() {
    let grid = VolumeGrid::centered_cube(16, 1.0).unwrap();
    let geom = sphere_covering_geometry(60, DetectorSpec::covering(&grid, 1.0).unwrap(), grid).unwrap();
    let anorm = estimate_anorm(&geom, 30, 1).unwrap();
    let op = AxdtOperator::with_quadrature(geom, 3, 4).unwrap();
    let bnorm = power_iteration(&op, 30, 2).unwrap();
    let bound = bnorm_bound(anorm, 4).unwrap();
    assert!(bnorm <= bound.safe_bound, "{bnorm} > {}", bound.safe_bound);
}

/// Smooth field of fiber axes over the volume.
fn axis_at(x: &Vec3) -> Vec3 {
    Vec3::new(1.0 + 0.1 * x.y, 0.3 - 0.05 * x.z, 0.2 + 0.07 * x.x).normalize()
}

#[test]
fn rotating_sample_and_poses_together_leaves_data_unchanged() {
    let n = 8;
    let grid = VolumeGrid::centered_cube(n, 1.0).unwrap();
    let det = DetectorSpec::covering(&grid, 1.0).unwrap();
    let geom = sphere_covering_geometry(6, det, grid).unwrap();
    // Quarter turn about z: (x, y, z) -> (-y, x, z).
    let q = nalgebra::Rotation3::from_axis_angle(&nalgebra::Vector3::z_axis(), FRAC_PI_2).into_inner();
    let rotated_poses: Vec<Pose> = geom
        .poses
        .iter()
        .map(|p| {
            let [psi, theta, phi] = p.euler;
            make_pose(psi, theta, phi - FRAC_PI_2, det).unwrap()
        })
        .collect();
    for (p, r) in geom.poses.iter().zip(&rotated_poses) {
        assert!((r.rotation - p.rotation * q.transpose()).amax() < 1e-12);
    }
    let rgeom = AcquisitionGeometry::new(rotated_poses, grid).unwrap();

    let sphere = sphere_grid(4);
    let mut eta = CoefficientVolume::zeros(grid, 4).unwrap();
    let mut eta_rot = CoefficientVolume::zeros(grid, 4).unwrap();
    for k in 0..n {
        for j in 0..n {
            for i in 0..n {
                let x = grid.voxel_center(i, j, k);
                let strength = 0.1 + 0.01 * (i + 2 * j + 3 * k) as f64;
                let a = axis_at(&x);
                eta.set_voxel(grid.index(i, j, k), &rod_coefficients(&a, 0.02, strength, &sphere, 4));
                // Voxel (i, j, k) moves to (n-1-j, i, k) with its axis rotated.
                let c = rod_coefficients(&(q * a), 0.02, strength, &sphere, 4);
                eta_rot.set_voxel(grid.index(n - 1 - j, i, k), &c);
            }
        }
    }
    let op = AxdtOperator::with_quadrature(geom, 3, 4).unwrap();
    let rop = AxdtOperator::with_quadrature(rgeom, 3, 4).unwrap();
    let a = op.apply(&eta.values);
    let b = rop.apply(&eta_rot.values);
    let diff: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
    assert!(norm(&diff) <= 1e-3 * norm(&a), "{}", norm(&diff) / norm(&a));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn poses_are_orthonormal(psi in -10.0..10.0f64, theta in -10.0..10.0f64, phi in -10.0..10.0f64) {
        let det = DetectorSpec::new(2, 3, 1.0).unwrap();
        let p = make_pose(psi, theta, phi, det).unwrap();
        prop_assert!((p.beam_dir.norm() - 1.0).abs() < 1e-12);
        prop_assert!((p.sens_dir.norm() - 1.0).abs() < 1e-12);
        prop_assert!(p.beam_dir.dot(&p.sens_dir).abs() < 1e-12);
        prop_assert!((p.rotation.determinant() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn covering_geometries_are_valid(n in 1usize..200) {
        let grid = VolumeGrid::centered_cube(4, 1.0).unwrap();
        let geom = sphere_covering_geometry(n, DetectorSpec::new(2, 2, 1.0).unwrap(), grid).unwrap();
        prop_assert_eq!(geom.n_poses(), n);
        for p in &geom.poses {
            prop_assert!(p.check().is_ok());
        }
    }

    #[test]
    fn weights_are_bounded(psi in 0.0..6.3f64, theta in 0.0..3.2f64, phi in 0.0..6.3f64) {
        let p = make_pose(psi, theta, phi, DetectorSpec::new(1, 1, 1.0).unwrap()).unwrap();
        let w = compute_pose_weights(&p, &sphere_grid(3), 4).unwrap();
        prop_assert!(w.iter().all(|v| v.abs() < 1.0));
    }

    #[test]
    fn projector_is_linear(seed in 0u64..1000, a in -2.0..2.0f64, b in -2.0..2.0f64) {
        let geom = small_geometry(3);
        let xr = XRayTransform::new(geom.clone());
        let mut r = rng(seed);
        let x = uniform(&mut r, geom.grid.n_voxels(), -1.0, 1.0);
        let y = uniform(&mut r, geom.grid.n_voxels(), -1.0, 1.0);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let lhs = xr.apply(&combo);
        let (px, py) = (xr.apply(&x), xr.apply(&y));
        let rhs: Vec<f64> = px.iter().zip(&py).map(|(u, v)| a * u + b * v).collect();
        let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(u, v)| u - v).collect();
        prop_assert!(norm(&diff) <= 1e-12 * norm(&rhs).max(1e-300));
        let sy = uniform(&mut r, geom.n_rays(), -1.0, 1.0);
        let gap = (dot(&px, &sy) - dot(&x, &xr.apply_adjoint(&sy))).abs();
        prop_assert!(gap <= 1e-10 * norm(&px) * norm(&sy));
    }

    #[test]
    fn axdt_operator_is_linear(seed in 0u64..1000, a in -2.0..2.0f64) {
        let geom = small_geometry(2);
        let op = AxdtOperator::with_quadrature(geom, 3, 4).unwrap();
        let mut r = rng(seed);
        let x = uniform(&mut r, op.domain_len(), -1.0, 1.0);
        let y = uniform(&mut r, op.domain_len(), -1.0, 1.0);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + v).collect();
        let (bx, by) = (op.apply(&x), op.apply(&y));
        let rhs: Vec<f64> = bx.iter().zip(&by).map(|(u, v)| a * u + v).collect();
        let diff: Vec<f64> = op.apply(&combo).iter().zip(&rhs).map(|(u, v)| u - v).collect();
        prop_assert!(norm(&diff) <= 1e-12 * norm(&rhs).max(1e-300));
    }
}

#[test]
fn step_is_half_the_smallest_spacing() {
    let grid = VolumeGrid::new([4, 5, 6], [0.5, 0.25, 1.0], [0.0; 3]).unwrap();
    assert_eq!(step_length(&grid), 0.125);
}
