use std::hint::black_box;

use axdt::geometry::{sphere_covering_geometry, DetectorSpec, VolumeGrid};
use axdt::models::M3Model;
use axdt::projector::XRayTransform;
use axdt::simulate::{make_crossed_rods_phantom, simulate_measurements, CrossedRods, SimulationConfig};
use axdt::specfun::{bessel_ratio, log_i0};
use axdt::{AxdtOperator, LinearOperator, Objective};
use criterion::{criterion_group, criterion_main, Criterion};

const N: usize = 24;
const POSES: usize = 30;

fn scan() -> (XRayTransform, AxdtOperator) {
    let grid = VolumeGrid::centered_cube(N, 1.0).unwrap();
    let det = DetectorSpec::covering(&grid, 1.0).unwrap();
    let geom = sphere_covering_geometry(POSES, det, grid).unwrap();
    let op = AxdtOperator::with_quadrature(geom.clone(), 3, 4).unwrap();
    (XRayTransform::new(geom), op)
}

fn projector(c: &mut Criterion) {
    let (xr, _) = scan();
    let x = vec![1.0; xr.domain_len()];
    let y = vec![1.0; xr.range_len()];
    c.bench_function("xray forward 24^3 x 30", |b| b.iter(|| xr.apply(black_box(&x))));
    c.bench_function("xray adjoint 24^3 x 30", |b| b.iter(|| xr.apply_adjoint(black_box(&y))));
}

fn axdt_operator(c: &mut Criterion) {
    let (_, op) = scan();
    let x = vec![0.1; op.domain_len()];
    let y = vec![1.0; op.range_len()];
    c.bench_function("B forward 24^3 x 30, K=4", |b| b.iter(|| op.apply(black_box(&x))));
    c.bench_function("B adjoint 24^3 x 30, K=4", |b| {
        b.iter(|| op.apply_adjoint(black_box(&y)))
    });
}

fn bessel(c: &mut Criterion) {
    let xs: Vec<f64> = (0..1000).map(|i| 10f64.powf(-3.0 + 9.0 * i as f64 / 999.0)).collect();
    c.bench_function("log_i0 x1000", |b| {
        b.iter(|| xs.iter().map(|&x| log_i0(black_box(x)).unwrap()).sum::<f64>())
    });
    c.bench_function("bessel_ratio x1000", |b| {
        b.iter(|| xs.iter().map(|&x| bessel_ratio(black_box(x)).unwrap()).sum::<f64>())
    });
}

fn m3_gradient(c: &mut Criterion) {
    let (_, op) = scan();
    let grid = op.geom.grid;
    let rods = CrossedRods {
        rod_radius: N as f64 / 6.0,
        ..CrossedRods::default()
    };
    let phantom = make_crossed_rods_phantom(grid, &rods).unwrap();
    let (data, _) = simulate_measurements(&phantom, &op, &SimulationConfig::default(), false).unwrap();
    let m3 = M3Model::new(&op, &data).unwrap();
    let x = phantom.eta_gt.values.clone();
    c.bench_function("m3 loss+gradient 24^3 x 30", |b| b.iter(|| m3.loss_grad(black_box(&x))));
}

criterion_group!(benches, projector, axdt_operator, bessel, m3_gradient);
criterion_main!(benches);
