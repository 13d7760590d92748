mod support;

use std::sync::OnceLock;

use axdt::models::{estimate_anorm, lipschitz_bound, M2Model, M3Model, ScaledObjective};
use axdt::optim::{cgls, run, Algorithm, LineSearch, RunStatus};
use axdt::projector::{power_iteration, XRayTransform};
use axdt::simulate::{simulate_measurements, SimulationConfig};
use axdt::vecops::norm;
use axdt::{LinearOperator, MeasurementSet, ModelKind, Objective, OptimizerConfig};
use support::*;

struct Scan {
    s: Setup,
    clean: MeasurementSet,
    noisy: MeasurementSet,
}

fn scan() -> &'static Scan {
    static SCAN: OnceLock<Scan> = OnceLock::new();
    SCAN.get_or_init(|| {
        let s = setup(16, 60, 1.0, 1.0);
        let sim = |noise| {
            let cfg = SimulationConfig {
                noise,
                ..SimulationConfig::default()
            };
            simulate_measurements(&s.phantom, &s.op, &cfg, false).unwrap().0
        };
        let (clean, noisy) = (sim(false), sim(true));
        Scan { s, clean, noisy }
    })
}

fn config(algorithm: Algorithm, iters: usize) -> OptimizerConfig {
    OptimizerConfig {
        grad_tol: 0.0,
        ..OptimizerConfig::new(algorithm, iters)
    }
}

fn zeros(s: &Setup) -> Vec<f64> {
    vec![0.0; s.op.domain_len()]
}

#[test]
fn nlcg_drops_m3_excess_by_three_orders_on_clean_data() {
    let sc = scan();
    let m3 = M3Model::new(&sc.s.op, &sc.clean).unwrap();
    let floor = m3.loss_floor();
    let (_, log) = run(&m3, &zeros(&sc.s), &config(Algorithm::Nlcg, 100)).unwrap();
    log.check_invariants().unwrap();
    let (first, last) = (log.initial_loss().unwrap() - floor, log.final_loss().unwrap() - floor);
    assert!(first >= 1e3 * last, "{first:e} -> {last:e}");
}

#[test]
fn nlcg_with_bb_steps_stays_finite() {
    let sc = scan();
    let m3 = M3Model::new(&sc.s.op, &sc.noisy).unwrap();
    let cfg = OptimizerConfig {
        line_search: LineSearch::BarzilaiBorwein,
        ..config(Algorithm::Nlcg, 100)
    };
    let (x, log) = run(&m3, &zeros(&sc.s), &cfg).unwrap();
    assert!(x.iter().all(|v| v.is_finite()));
    assert!(log.records.iter().all(|r| r.loss.is_finite()));
    assert!(!log.status.to_string().is_empty());
}

#[test]
fn lbfgs_memory_has_little_influence() {
    let sc = scan();
    let m3 = M3Model::new(&sc.s.op, &sc.noisy).unwrap();
    let floor = m3.loss_floor();
    let x0 = zeros(&sc.s);
    let excess = |memory| {
        let cfg = OptimizerConfig {
            lbfgs_memory: memory,
            ..config(Algorithm::Lbfgs, 200)
        };
        let (_, log) = run(&m3, &x0, &cfg).unwrap();
        assert_eq!(log.status, RunStatus::MaxIterations);
        log.final_loss().unwrap() - floor
    };
    let (e5, e10) = (excess(5), excess(10));
    assert!((e5 - e10).abs() <= 0.05 * e10.max(e5), "{e5:e} vs {e10:e}");
}

#[test]
fn lbfgs_beats_nlcg_on_m2() {
    let sc = scan();
    let (s, data) = (&sc.s, &sc.noisy);
    let m2 = M2Model::new(&s.op, data).unwrap();
    let xr = XRayTransform::new(s.geom.clone());
    let (mut x0, _) = cgls(&xr, &data.neg_log_transmission(), None, &config(Algorithm::Cgls, 50)).unwrap();
    x0.extend(zeros(s));
    let scaled = ScaledObjective::new(&m2, m2.scaling(m2.block_scale(&x0))).unwrap();
    let z0 = scaled.to_scaled(&x0);
    let (_, lb) = run(&scaled, &z0, &config(Algorithm::Lbfgs, 100)).unwrap();
    let (_, cg) = run(&scaled, &z0, &config(Algorithm::Nlcg, 100)).unwrap();
    let (a, b) = (lb.final_loss().unwrap(), cg.final_loss().unwrap());
    assert!(a < b, "{a:e} vs {b:e}");
    assert!(a < lb.initial_loss().unwrap());
}

#[test]
fn fgm_at_safe_step_tracks_lbfgs() {
    let sc = scan();
    let m3 = M3Model::new(&sc.s.op, &sc.noisy).unwrap();
    let anorm = estimate_anorm(&sc.s.geom, 50, 1).unwrap();
    let lsafe = lipschitz_bound(ModelKind::M3, anorm, 4, m3.curvature_factor())
        .unwrap()
        .safe
        .unwrap();
    let x0 = zeros(&sc.s);
    let cfg = OptimizerConfig {
        fgm_step: Some(1.0 / lsafe),
        ..config(Algorithm::Fgm, 200)
    };
    let (_, fg) = run(&m3, &x0, &cfg).unwrap();
    let (_, lb) = run(&m3, &x0, &config(Algorithm::Lbfgs, 200)).unwrap();
    let (f, l) = (fg.final_loss().unwrap(), lb.final_loss().unwrap());
    assert!(f < fg.initial_loss().unwrap());
    // Both losses are negative here; compare magnitudes.
    let ratio = f.abs().max(l.abs()) / f.abs().min(l.abs());
    assert!(ratio <= 2.0, "fgm {f:e} lbfgs {l:e}");
}

#[test]
fn fgm_outside_guarantee_reports_divergence() {
    let sc = scan();
    let m3 = M3Model::new(&sc.s.op, &sc.noisy).unwrap();
    let x0 = zeros(&sc.s);
    let lam = power_iteration(
        &Hessian {
            model: &m3,
            x: x0.clone(),
        },
        20,
        9,
    )
    .unwrap();
    let cfg = OptimizerConfig {
        fgm_step: Some(10.0 / lam),
        ..config(Algorithm::Fgm, 50)
    };
    let (x, log) = run(&m3, &x0, &cfg).unwrap();
    assert!(
        matches!(log.status, RunStatus::Diverged | RunStatus::NonFinite),
        "{}",
        log.status
    );
    assert!(log.iterations() < 50);
    assert!(norm(&x).is_finite());
}

#[test]
fn cgls_reaches_small_residual_on_clean_data() {
    let sc = scan();
    let b = sc.clean.neg_log_darkfield();
    let (x, log) = cgls(&sc.s.op, &b, None, &config(Algorithm::Cgls, 500)).unwrap();
    let r: Vec<f64> = sc.s.op.apply(&x).iter().zip(&b).map(|(p, q)| p - q).collect();
    assert!(norm(&r) < 1e-3 * norm(&b));
    let losses = log.losses();
    assert!(losses.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
}

#[test]
fn runs_are_deterministic() {
    let sc = scan();
    let m3 = M3Model::new(&sc.s.op, &sc.noisy).unwrap();
    let x0 = zeros(&sc.s);
    let (a, _) = run(&m3, &x0, &config(Algorithm::Lbfgs, 10)).unwrap();
    let (b, _) = run(&m3, &x0, &config(Algorithm::Lbfgs, 10)).unwrap();
    assert_eq!(a, b);
    assert!(m3.loss(&a) <= m3.loss(&x0));
}
