//! Reconstruction objectives.
//!
//! Three models share the [`Objective`] interface:
//!
//! * **m1** linearized least squares `1/2 ||B eta + ln d||^2`.
//! * **m2** joint Gaussian/Rician negative log-likelihood in `(mu, eta)`.
//! * **m3** Rician negative log-likelihood in `eta` with the attenuation
//!   treated as known.
//!
//! Forward values use `d_eta = exp(-B eta)` and
//! `a_mu = a_ref * exp(-A mu)`, so `B eta >= 0` corresponds to `d <= 1`.
//! All Bessel terms go through [`crate::specfun`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AcquisitionGeometry, CoefficientVolume, ScalarVolume};
use crate::projector::{backproject_raw, project_raw, LinearOperator, XRayTransform};
use crate::specfun::{ln_i0, ratio_i1_i0};
use crate::sphharm::{bnorm_bound, AxdtOperator, BNormBound, ANORM_SAFETY};
use crate::vecops::dot;

/// Sanitised amplitudes are raised to this fraction of the reference mean.
pub const CLAMP_FRACTION: f64 = 1e-12;

/// Fourier amplitudes of sample and reference scans, one entry per ray.
#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementSet {
    pub n_poses: usize,
    pub rows: usize,
    pub cols: usize,
    pub phase_steps: usize,
    pub a_s: Vec<f64>,
    pub b_s: Vec<f64>,
    pub a_r: Vec<f64>,
    pub b_r: Vec<f64>,
    /// Number of sample amplitudes raised during sanitation.
    pub clamped: usize,
    /// Rays that had at least one amplitude raised.
    pub clamped_rays: Vec<usize>,
}

impl MeasurementSet {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        n_poses: usize,
        rows: usize,
        cols: usize,
        phase_steps: usize,
        mut a_s: Vec<f64>,
        mut b_s: Vec<f64>,
        a_r: Vec<f64>,
        b_r: Vec<f64>,
    ) -> Result<Self> {
        let n = n_poses * rows * cols;
        if [&a_s, &b_s, &a_r, &b_r].iter().any(|c| c.len() != n) {
            return Err(Error::shape(format!("every amplitude channel needs {n} values")));
        }
        if phase_steps < 3 {
            return Err(Error::invalid(format!(
                "at least 3 phase steps are required, got {phase_steps}"
            )));
        }
        for j in 0..n {
            if !(a_r[j] > 0.0) || !(b_r[j] > 0.0) || !(b_r[j] < a_r[j]) {
                return Err(Error::invalid(format!(
                    "reference amplitudes at ray {j} must satisfy 0 < b_r < a_r"
                )));
            }
        }
        let mut clamped = 0;
        let mut clamped_rays = Vec::new();
        for j in 0..n {
            let floor = CLAMP_FRACTION * a_r[j];
            let mut hit = false;
            for v in [&mut a_s[j], &mut b_s[j]] {
                if !(*v > 0.0) {
                    *v = floor;
                    clamped += 1;
                    hit = true;
                }
            }
            if hit {
                clamped_rays.push(j);
            }
        }
        Ok(Self {
            n_poses,
            rows,
            cols,
            phase_steps,
            a_s,
            b_s,
            a_r,
            b_r,
            clamped,
            clamped_rays,
        })
    }

    pub fn n_rays(&self) -> usize {
        self.a_s.len()
    }

    /// Reference visibility `b_r / a_r`.
    pub fn alpha(&self, j: usize) -> f64 {
        self.b_r[j] / self.a_r[j]
    }

    pub fn transmission(&self, j: usize) -> f64 {
        self.a_s[j] / self.a_r[j]
    }

    pub fn darkfield(&self, j: usize) -> f64 {
        (self.b_s[j] * self.a_r[j]) / (self.a_s[j] * self.b_r[j])
    }

    /// `-ln d` per ray, the m1 right-hand side.
    pub fn neg_log_darkfield(&self) -> Vec<f64> {
        (0..self.n_rays()).map(|j| -self.darkfield(j).ln()).collect()
    }

    /// `-ln T` per ray, used to initialise the attenuation.
    pub fn neg_log_transmission(&self) -> Vec<f64> {
        (0..self.n_rays()).map(|j| -self.transmission(j).ln()).collect()
    }

    pub fn check_geometry(&self, geom: &AcquisitionGeometry) -> Result<()> {
        let det = geom.detector();
        if self.n_poses != geom.n_poses() || self.rows != det.rows || self.cols != det.cols {
            return Err(Error::shape("measurement shape does not match the geometry"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    M1,
    M2,
    M3,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ModelKind::M1 => "m1",
            ModelKind::M2 => "m2",
            ModelKind::M3 => "m3",
        })
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "m1" => Ok(ModelKind::M1),
            "m2" => Ok(ModelKind::M2),
            "m3" => Ok(ModelKind::M3),
            other => Err(Error::invalid(format!("unknown model `{other}`"))),
        }
    }
}

/// Loss, gradient and per-ray curvature terms at one point.
#[derive(Clone, Debug, Default)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub violations: usize,
    /// Model-specific second-derivative terms reused by [`Objective::curvature_at`].
    pub curvature_terms: Vec<f64>,
}

/// Smooth objective on a flat unknown vector.
pub trait Objective: Sync {
    fn kind(&self) -> ModelKind;

    fn dim(&self) -> usize;

    fn loss(&self, x: &[f64]) -> f64;

    fn loss_grad(&self, x: &[f64]) -> (f64, Vec<f64>);

    fn hessvec(&self, x: &[f64], v: &[f64]) -> Vec<f64>;

    /// `<v, H(x) v>`; models override this with a forward-only evaluation.
    fn curvature(&self, x: &[f64], v: &[f64]) -> f64 {
        dot(v, &self.hessvec(x, v))
    }

    /// Rays outside the physical domain (`B eta < 0`, and `A mu < 0` for m2).
    fn violations(&self, _x: &[f64]) -> usize {
        0
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        let (loss, grad) = self.loss_grad(x);
        Evaluation {
            loss,
            grad,
            violations: self.violations(x),
            curvature_terms: Vec::new(),
        }
    }

    /// `<v, H(x) v>` reusing the terms cached in `eval`, which must come from
    /// [`Objective::evaluate`] at the same `x`.
    fn curvature_at(&self, eval: &Evaluation, x: &[f64], v: &[f64]) -> f64 {
        let _ = eval;
        self.curvature(x, v)
    }
}

/// Sum with Neumaier compensation; keeps finite-difference checks of large
/// losses meaningful.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

fn count_negative(v: &[f64]) -> usize {
    v.iter().filter(|&&x| x < 0.0).count()
}

/// Cached forward values of a model at one point.
#[derive(Clone, Debug)]
pub struct ModelState {
    /// `B eta` per ray.
    pub forward_eta: Vec<f64>,
    /// `A mu` per ray (m2 only).
    pub forward_mu: Option<Vec<f64>>,
    pub d_eta: Vec<f64>,
    pub a_mu: Option<Vec<f64>>,
}

impl ModelState {
    pub fn violations(&self) -> usize {
        count_negative(&self.forward_eta) + self.forward_mu.as_deref().map_or(0, count_negative)
    }
}

// ---------------------------------------------------------------------------
// m1

pub struct M1Model<'a> {
    op: &'a AxdtOperator,
    rhs: Vec<f64>,
}

impl<'a> M1Model<'a> {
    pub fn new(op: &'a AxdtOperator, data: &MeasurementSet) -> Result<Self> {
        data.check_geometry(&op.geom)?;
        if (0..data.n_rays()).any(|j| !(data.darkfield(j) > 0.0)) {
            return Err(Error::invalid("m1 needs a positive dark-field signal on every ray"));
        }
        Ok(Self {
            op,
            rhs: data.neg_log_darkfield(),
        })
    }

    /// `-ln d`.
    pub fn rhs(&self) -> &[f64] {
        &self.rhs
    }

    fn residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = self.op.apply(x);
        r.iter_mut().zip(&self.rhs).for_each(|(a, b)| *a -= b);
        r
    }
}

impl Objective for M1Model<'_> {
    fn kind(&self) -> ModelKind {
        ModelKind::M1
    }

    fn dim(&self) -> usize {
        self.op.domain_len()
    }

    fn loss(&self, x: &[f64]) -> f64 {
        0.5 * compensated_sum(self.residual(x).iter().map(|r| r * r))
    }

    fn loss_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let r = self.residual(x);
        let loss = 0.5 * compensated_sum(r.iter().map(|v| v * v));
        (loss, self.op.apply_adjoint(&r))
    }

    fn hessvec(&self, _x: &[f64], v: &[f64]) -> Vec<f64> {
        self.op.apply_adjoint(&self.op.apply(v))
    }

    fn curvature(&self, _x: &[f64], v: &[f64]) -> f64 {
        let bv = self.op.apply(v);
        dot(&bv, &bv)
    }

    fn violations(&self, x: &[f64]) -> usize {
        count_negative(&self.op.apply(x))
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        let r = self.residual(x);
        Evaluation {
            loss: 0.5 * compensated_sum(r.iter().map(|v| v * v)),
            violations: r.iter().zip(&self.rhs).filter(|(r, b)| *r + *b < 0.0).count(),
            grad: self.op.apply_adjoint(&r),
            curvature_terms: Vec::new(),
        }
    }

    fn curvature_at(&self, _eval: &Evaluation, x: &[f64], v: &[f64]) -> f64 {
        self.curvature(x, v)
    }
}

/// `(loss, grad)` of m1 on a coefficient volume.
pub fn m1_loss_grad(
    op: &AxdtOperator,
    eta: &CoefficientVolume,
    data: &MeasurementSet,
) -> Result<(f64, CoefficientVolume)> {
    let model = M1Model::new(op, data)?;
    check_eta(op, eta)?;
    let (loss, g) = model.loss_grad(&eta.values);
    Ok((loss, CoefficientVolume::from_values(eta.grid, eta.max_degree, g)?))
}

fn check_eta(op: &AxdtOperator, eta: &CoefficientVolume) -> Result<()> {
    if eta.grid != op.geom.grid || eta.max_degree != op.max_degree() {
        return Err(Error::shape("coefficient volume does not match the operator"));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// m3

/// Per-ray constants of the Rician likelihood.
#[derive(Clone, Copy, Debug)]
pub struct RicianRay {
    pub a: f64,
    pub b: f64,
    pub alpha: f64,
    pub n: f64,
}

/// Loss, first and second derivative of one m3 term with respect to the
/// ray value `p = (B eta)_j`.
#[inline]
pub fn m3_ray_terms(ray: &RicianRay, p: f64) -> (f64, f64, f64) {
    let d = (-p).exp();
    let quad = 0.5 * ray.n * ray.a * ray.alpha * ray.alpha * d * d;
    let z = 0.5 * ray.n * ray.b * ray.alpha * d;
    let r = ratio_i1_i0(z);
    let loss = 0.5 * quad - ln_i0(z);
    let grad = z * r - quad;
    let hess = 2.0 * quad + z * z * (r * r - 1.0);
    (loss, grad, hess)
}

/// Minimum of one m3 term over `d > 0`.
///
/// The stationary point satisfies `z = kappa * r(z)` with
/// `kappa = N b^2 / (2 a)`; a nonzero root exists only for `kappa > 2`,
/// otherwise the infimum 0 is approached as `d -> 0`.
pub fn m3_ray_floor(ray: &RicianRay) -> f64 {
    let kappa = 0.5 * ray.n * ray.b * ray.b / ray.a;
    if kappa <= 2.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0_f64, kappa);
    // g(z) = kappa r(z) - z is positive on (0, z*) and negative beyond.
    lo = lo.max(1e-300);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if kappa * ratio_i1_i0(mid) - mid > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let z = 0.5 * (lo + hi);
    let d = z / (0.5 * ray.n * ray.b * ray.alpha);
    let (loss, _, _) = m3_ray_terms(ray, -d.ln());
    loss.min(0.0)
}

pub struct M3Model<'a> {
    op: &'a AxdtOperator,
    rays: Vec<RicianRay>,
}

impl<'a> M3Model<'a> {
    pub fn new(op: &'a AxdtOperator, data: &MeasurementSet) -> Result<Self> {
        data.check_geometry(&op.geom)?;
        let n = data.phase_steps as f64;
        let rays = (0..data.n_rays())
            .map(|j| RicianRay {
                a: data.a_s[j],
                b: data.b_s[j],
                alpha: data.alpha(j),
                n,
            })
            .collect();
        Ok(Self { op, rays })
    }

    pub fn rays(&self) -> &[RicianRay] {
        &self.rays
    }

    pub fn state(&self, x: &[f64]) -> ModelState {
        let p = self.op.apply(x);
        ModelState {
            d_eta: p.iter().map(|v| (-v).exp()).collect(),
            forward_eta: p,
            forward_mu: None,
            a_mu: None,
        }
    }

    fn terms(&self, p: &[f64]) -> Vec<(f64, f64, f64)> {
        p.par_iter()
            .zip(self.rays.par_iter())
            .map(|(&p, ray)| m3_ray_terms(ray, p))
            .collect()
    }

    /// Lower bound of the loss: the sum of per-ray minima.
    pub fn loss_floor(&self) -> f64 {
        compensated_sum(self.rays.iter().map(m3_ray_floor))
    }

    /// Per-ray Hessian diagonal at `x`.
    pub fn hessian_diagonal(&self, x: &[f64]) -> Vec<f64> {
        self.terms(&self.op.apply(x)).into_iter().map(|t| t.2).collect()
    }

    /// `N max_j (a alpha^2 + b alpha)`, the factor multiplying `||B||^2` in
    /// the Lipschitz bound.
    pub fn curvature_factor(&self) -> f64 {
        self.rays
            .iter()
            .map(|r| r.n * (r.a * r.alpha * r.alpha + r.b * r.alpha))
            .fold(0.0, f64::max)
    }
}

impl Objective for M3Model<'_> {
    fn kind(&self) -> ModelKind {
        ModelKind::M3
    }

    fn dim(&self) -> usize {
        self.op.domain_len()
    }

    fn loss(&self, x: &[f64]) -> f64 {
        compensated_sum(self.terms(&self.op.apply(x)).into_iter().map(|t| t.0))
    }

    fn loss_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let t = self.terms(&self.op.apply(x));
        let loss = compensated_sum(t.iter().map(|t| t.0));
        let g: Vec<f64> = t.iter().map(|t| t.1).collect();
        (loss, self.op.apply_adjoint(&g))
    }

    fn hessvec(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let t = self.terms(&self.op.apply(x));
        let mut bv = self.op.apply(v);
        bv.iter_mut().zip(&t).for_each(|(b, t)| *b *= t.2);
        self.op.apply_adjoint(&bv)
    }

    fn curvature(&self, x: &[f64], v: &[f64]) -> f64 {
        let t = self.terms(&self.op.apply(x));
        let bv = self.op.apply(v);
        compensated_sum(bv.iter().zip(&t).map(|(b, t)| t.2 * b * b))
    }

    fn violations(&self, x: &[f64]) -> usize {
        count_negative(&self.op.apply(x))
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        let p = self.op.apply(x);
        let t = self.terms(&p);
        let g: Vec<f64> = t.iter().map(|t| t.1).collect();
        Evaluation {
            loss: compensated_sum(t.iter().map(|t| t.0)),
            grad: self.op.apply_adjoint(&g),
            violations: count_negative(&p),
            curvature_terms: t.iter().map(|t| t.2).collect(),
        }
    }

    fn curvature_at(&self, eval: &Evaluation, x: &[f64], v: &[f64]) -> f64 {
        if eval.curvature_terms.len() != self.rays.len() {
            return self.curvature(x, v);
        }
        let bv = self.op.apply(v);
        compensated_sum(bv.iter().zip(&eval.curvature_terms).map(|(b, h)| h * b * b))
    }
}

pub fn m3_loss(op: &AxdtOperator, eta: &CoefficientVolume, data: &MeasurementSet) -> Result<f64> {
    check_eta(op, eta)?;
    Ok(M3Model::new(op, data)?.loss(&eta.values))
}

pub fn m3_grad(op: &AxdtOperator, eta: &CoefficientVolume, data: &MeasurementSet) -> Result<CoefficientVolume> {
    check_eta(op, eta)?;
    let (_, g) = M3Model::new(op, data)?.loss_grad(&eta.values);
    CoefficientVolume::from_values(eta.grid, eta.max_degree, g)
}

pub fn m3_hessvec(
    op: &AxdtOperator,
    eta: &CoefficientVolume,
    data: &MeasurementSet,
    v: &CoefficientVolume,
) -> Result<CoefficientVolume> {
    check_eta(op, eta)?;
    check_eta(op, v)?;
    let hv = M3Model::new(op, data)?.hessvec(&eta.values, &v.values);
    CoefficientVolume::from_values(eta.grid, eta.max_degree, hv)
}

// ---------------------------------------------------------------------------
// m2

/// Derivatives of one m2 term with respect to `q = (A mu)_j` and
/// `p = (B eta)_j`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct M2RayTerms {
    pub loss: f64,
    pub dq: f64,
    pub dp: f64,
    pub dqq: f64,
    pub dqp: f64,
    pub dpp: f64,
}

/// One m2 term given the expected mean amplitude `a_mu` directly.
///
/// `f = 3/2 ln a_mu + N (2 a^2 + 2 a_mu^2 + b^2 + (alpha a_mu d)^2) / (4 a_mu)
///      - ln I0(N/2 b alpha d)`.
/// Derivatives in `q` assume `a_mu = a_ref exp(-q)`.
#[inline]
pub fn m2_ray_terms(ray: &RicianRay, a_mu: f64, p: f64) -> M2RayTerms {
    let n = ray.n;
    let d = (-p).exp();
    let ad2 = ray.alpha * ray.alpha * d * d;
    let data = 2.0 * ray.a * ray.a + ray.b * ray.b;
    let z = 0.5 * n * ray.b * ray.alpha * d;
    let r = ratio_i1_i0(z);
    let loss = 1.5 * a_mu.ln() + n * (data + 2.0 * a_mu * a_mu + a_mu * a_mu * ad2) / (4.0 * a_mu) - ln_i0(z);
    let inv = n * data / (4.0 * a_mu);
    let lin = 0.5 * n * a_mu;
    let vis = 0.25 * n * a_mu * ad2;
    M2RayTerms {
        loss,
        dq: -1.5 + inv - lin - vis,
        dp: z * r - 2.0 * vis,
        dqq: inv + lin + vis,
        dqp: 2.0 * vis,
        dpp: 4.0 * vis + z * z * (r * r - 1.0),
    }
}

pub struct M2Model<'a> {
    axdt: &'a AxdtOperator,
    rays: Vec<RicianRay>,
    a_ref: Vec<f64>,
}

impl<'a> M2Model<'a> {
    pub fn new(axdt: &'a AxdtOperator, data: &MeasurementSet) -> Result<Self> {
        data.check_geometry(&axdt.geom)?;
        let n = data.phase_steps as f64;
        let rays = (0..data.n_rays())
            .map(|j| RicianRay {
                a: data.a_s[j],
                b: data.b_s[j],
                alpha: data.alpha(j),
                n,
            })
            .collect();
        Ok(Self {
            axdt,
            rays,
            a_ref: data.a_r.clone(),
        })
    }

    pub fn n_voxels(&self) -> usize {
        self.axdt.geom.grid.n_voxels()
    }

    /// Splits a stacked unknown into `(mu, eta)`.
    pub fn split<'x>(&self, x: &'x [f64]) -> (&'x [f64], &'x [f64]) {
        x.split_at(self.n_voxels())
    }

    pub fn stack(&self, mu: &ScalarVolume, eta: &CoefficientVolume) -> Vec<f64> {
        let mut x = mu.values.clone();
        x.extend_from_slice(&eta.values);
        x
    }

    pub fn state(&self, x: &[f64]) -> ModelState {
        let (mu, eta) = self.split(x);
        let q = project_raw(mu, &self.axdt.geom);
        let p = self.axdt.apply(eta);
        ModelState {
            d_eta: p.iter().map(|v| (-v).exp()).collect(),
            a_mu: Some(q.iter().zip(&self.a_ref).map(|(q, a)| a * (-q).exp()).collect()),
            forward_eta: p,
            forward_mu: Some(q),
        }
    }

    fn terms_from(&self, a_mu: &[f64], p: &[f64]) -> Vec<M2RayTerms> {
        a_mu.par_iter()
            .zip(p.par_iter())
            .zip(self.rays.par_iter())
            .map(|((&am, &p), ray)| m2_ray_terms(ray, am, p))
            .collect()
    }

    fn terms(&self, x: &[f64]) -> Vec<M2RayTerms> {
        let s = self.state(x);
        self.terms_from(s.a_mu.as_deref().expect("m2 state"), &s.forward_eta)
    }

    /// Loss with the mean amplitude fixed per ray instead of derived from mu.
    pub fn loss_with_attenuation(&self, a_mu: &[f64], eta: &[f64]) -> f64 {
        let p = self.axdt.apply(eta);
        compensated_sum(self.terms_from(a_mu, &p).into_iter().map(|t| t.loss))
    }

    /// Eta-gradient with the mean amplitude fixed per ray.
    pub fn eta_grad_with_attenuation(&self, a_mu: &[f64], eta: &[f64]) -> Vec<f64> {
        let p = self.axdt.apply(eta);
        let g: Vec<f64> = self.terms_from(a_mu, &p).iter().map(|t| t.dp).collect();
        self.axdt.apply_adjoint(&g)
    }
}

impl Objective for M2Model<'_> {
    fn kind(&self) -> ModelKind {
        ModelKind::M2
    }

    fn dim(&self) -> usize {
        self.n_voxels() + self.axdt.domain_len()
    }

    fn loss(&self, x: &[f64]) -> f64 {
        compensated_sum(self.terms(x).into_iter().map(|t| t.loss))
    }

    fn loss_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let t = self.terms(x);
        let loss = compensated_sum(t.iter().map(|t| t.loss));
        let gq: Vec<f64> = t.iter().map(|t| t.dq).collect();
        let gp: Vec<f64> = t.iter().map(|t| t.dp).collect();
        let mut g = backproject_raw(&gq, &self.axdt.geom);
        g.extend(self.axdt.apply_adjoint(&gp));
        (loss, g)
    }

    fn hessvec(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let t = self.terms(x);
        let (vmu, veta) = self.split(v);
        let aq = project_raw(vmu, &self.axdt.geom);
        let bp = self.axdt.apply(veta);
        let uq: Vec<f64> = t
            .iter()
            .zip(aq.iter().zip(&bp))
            .map(|(t, (a, b))| t.dqq * a + t.dqp * b)
            .collect();
        let up: Vec<f64> = t
            .iter()
            .zip(aq.iter().zip(&bp))
            .map(|(t, (a, b))| t.dqp * a + t.dpp * b)
            .collect();
        let mut out = backproject_raw(&uq, &self.axdt.geom);
        out.extend(self.axdt.apply_adjoint(&up));
        out
    }

    fn curvature(&self, x: &[f64], v: &[f64]) -> f64 {
        let t = self.terms(x);
        let (vmu, veta) = self.split(v);
        let aq = project_raw(vmu, &self.axdt.geom);
        let bp = self.axdt.apply(veta);
        compensated_sum(
            t.iter()
                .zip(aq.iter().zip(&bp))
                .map(|(t, (a, b))| t.dqq * a * a + 2.0 * t.dqp * a * b + t.dpp * b * b),
        )
    }

    fn violations(&self, x: &[f64]) -> usize {
        self.state(x).violations()
    }

    fn evaluate(&self, x: &[f64]) -> Evaluation {
        let s = self.state(x);
        let t = self.terms_from(s.a_mu.as_deref().expect("m2 state"), &s.forward_eta);
        let gq: Vec<f64> = t.iter().map(|t| t.dq).collect();
        let gp: Vec<f64> = t.iter().map(|t| t.dp).collect();
        let mut grad = backproject_raw(&gq, &self.axdt.geom);
        grad.extend(self.axdt.apply_adjoint(&gp));
        Evaluation {
            loss: compensated_sum(t.iter().map(|t| t.loss)),
            grad,
            violations: s.violations(),
            curvature_terms: t.iter().flat_map(|t| [t.dqq, t.dqp, t.dpp]).collect(),
        }
    }

    fn curvature_at(&self, eval: &Evaluation, x: &[f64], v: &[f64]) -> f64 {
        if eval.curvature_terms.len() != 3 * self.rays.len() {
            return self.curvature(x, v);
        }
        let (vmu, veta) = self.split(v);
        let aq = project_raw(vmu, &self.axdt.geom);
        let bp = self.axdt.apply(veta);
        compensated_sum(
            eval.curvature_terms
                .chunks_exact(3)
                .zip(aq.iter().zip(&bp))
                .map(|(h, (a, b))| h[0] * a * a + 2.0 * h[1] * a * b + h[2] * b * b),
        )
    }
}

impl M2Model<'_> {
    /// Factor `c` for the change of variables `eta = c * zeta` that equalises
    /// the curvature of the attenuation and scattering blocks at `x`: the
    /// ratio of `<v,Hv>` along a constant `mu` and a constant `eta_0^0`.
    pub fn block_scale(&self, x: &[f64]) -> f64 {
        let eval = self.evaluate(x);
        let nv = self.n_voxels();
        let mut v = vec![0.0; self.dim()];
        v[..nv].fill(1.0);
        let c_mu = self.curvature_at(&eval, x, &v);
        v.fill(0.0);
        v[nv..2 * nv].fill(1.0);
        let c_eta = self.curvature_at(&eval, x, &v);
        let c = (c_mu / c_eta).sqrt();
        if c.is_finite() && c > 0.0 {
            c
        } else {
            1.0
        }
    }

    /// Per-variable scales: 1 on `mu`, `c` on `eta`.
    pub fn scaling(&self, c: f64) -> Vec<f64> {
        let nv = self.n_voxels();
        (0..self.dim()).map(|i| if i < nv { 1.0 } else { c }).collect()
    }
}

/// Objective in scaled variables `x = D z` for a positive diagonal `D`.
///
/// Losses are unchanged; gradients and curvatures transform as
/// `D g` and `D H D`.
pub struct ScaledObjective<'a> {
    inner: &'a dyn Objective,
    scale: Vec<f64>,
}

impl<'a> ScaledObjective<'a> {
    pub fn new(inner: &'a dyn Objective, scale: Vec<f64>) -> Result<Self> {
        if scale.len() != inner.dim() {
            return Err(Error::shape("scaling length does not match the objective"));
        }
        if scale.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid("scales must be positive and finite"));
        }
        Ok(Self { inner, scale })
    }

    /// `x = D z`.
    pub fn to_original(&self, z: &[f64]) -> Vec<f64> {
        z.iter().zip(&self.scale).map(|(z, d)| z * d).collect()
    }

    /// `z = D^-1 x`.
    pub fn to_scaled(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.scale).map(|(x, d)| x / d).collect()
    }
}

impl Objective for ScaledObjective<'_> {
    fn kind(&self) -> ModelKind {
        self.inner.kind()
    }

    fn dim(&self) -> usize {
        self.scale.len()
    }

    fn loss(&self, z: &[f64]) -> f64 {
        self.inner.loss(&self.to_original(z))
    }

    fn loss_grad(&self, z: &[f64]) -> (f64, Vec<f64>) {
        let (loss, g) = self.inner.loss_grad(&self.to_original(z));
        (loss, self.to_original(&g))
    }

    fn hessvec(&self, z: &[f64], v: &[f64]) -> Vec<f64> {
        let hv = self.inner.hessvec(&self.to_original(z), &self.to_original(v));
        self.to_original(&hv)
    }

    fn curvature(&self, z: &[f64], v: &[f64]) -> f64 {
        self.inner.curvature(&self.to_original(z), &self.to_original(v))
    }

    fn violations(&self, z: &[f64]) -> usize {
        self.inner.violations(&self.to_original(z))
    }

    fn evaluate(&self, z: &[f64]) -> Evaluation {
        let mut eval = self.inner.evaluate(&self.to_original(z));
        eval.grad = self.to_original(&eval.grad);
        eval
    }

    fn curvature_at(&self, eval: &Evaluation, z: &[f64], v: &[f64]) -> f64 {
        self.inner
            .curvature_at(eval, &self.to_original(z), &self.to_original(v))
    }
}

pub fn m2_loss(op: &AxdtOperator, mu: &ScalarVolume, eta: &CoefficientVolume, data: &MeasurementSet) -> Result<f64> {
    check_eta(op, eta)?;
    crate::projector::check_grid(&mu.grid, &op.geom)?;
    let model = M2Model::new(op, data)?;
    Ok(model.loss(&model.stack(mu, eta)))
}

pub fn m2_grad(
    op: &AxdtOperator,
    mu: &ScalarVolume,
    eta: &CoefficientVolume,
    data: &MeasurementSet,
) -> Result<(ScalarVolume, CoefficientVolume)> {
    check_eta(op, eta)?;
    crate::projector::check_grid(&mu.grid, &op.geom)?;
    let model = M2Model::new(op, data)?;
    let (_, mut g) = model.loss_grad(&model.stack(mu, eta));
    let g_eta = g.split_off(model.n_voxels());
    Ok((
        ScalarVolume::from_values(mu.grid, g)?,
        CoefficientVolume::from_values(eta.grid, eta.max_degree, g_eta)?,
    ))
}

// ---------------------------------------------------------------------------
// Lipschitz bounds

/// Lipschitz bounds of a model's gradient on the feasible set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LipschitzReport {
    pub anorm: f64,
    pub bnorm: BNormBound,
    /// Bound built from the conservative `||B||` bound; `None` for m2.
    pub safe: Option<f64>,
    /// Same bound with `K / (4 pi) ||A||` in place of the conservative one.
    pub nominal: Option<f64>,
}

/// `||A||` from power iteration, inflated by [`ANORM_SAFETY`].
pub fn estimate_anorm(geom: &AcquisitionGeometry, n_iters: usize, seed: u64) -> Result<f64> {
    let raw = crate::projector::power_iteration(&XRayTransform::new(geom.clone()), n_iters, seed)?;
    Ok(ANORM_SAFETY * raw)
}

/// Lipschitz bound for a model. `curvature_factor` is 1 for m1 and
/// [`M3Model::curvature_factor`] for m3; it is ignored for m2.
pub fn lipschitz_bound(
    kind: ModelKind,
    anorm: f64,
    max_degree: usize,
    curvature_factor: f64,
) -> Result<LipschitzReport> {
    let bnorm = bnorm_bound(anorm, max_degree)?;
    let (safe, nominal) = match kind {
        ModelKind::M1 => (Some(bnorm.safe_bound.powi(2)), Some(bnorm.nominal_bound.powi(2))),
        ModelKind::M3 => (
            Some(curvature_factor * bnorm.safe_bound.powi(2)),
            Some(curvature_factor * bnorm.nominal_bound.powi(2)),
        ),
        ModelKind::M2 => (None, None),
    };
    Ok(LipschitzReport {
        anorm,
        bnorm,
        safe,
        nominal,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ray(a: f64, b: f64, alpha: f64, n: f64) -> RicianRay {
        RicianRay { a, b, alpha, n }
    }

    #[test]
    fn m3_terms_with_zero_visibility_signal() {
        let r = ray(100.0, 0.0, 0.3, 8.0);
        let (loss, grad, _) = m3_ray_terms(&r, 0.4);
        let d = (-0.4f64).exp();
        assert!((loss - 2.0 * 100.0 * 0.09 * d * d).abs() < 1e-12);
        assert!((grad + 4.0 * 100.0 * 0.09 * d * d).abs() < 1e-12);
    }

    #[test]
    fn m3_terms_match_finite_differences() {
        let r = ray(1e4, 2500.0, 0.3, 8.0);
        for p in [0.0, 0.1, 0.5, 1.3, 3.0] {
            let h = 1e-5;
            let (_, g, hs) = m3_ray_terms(&r, p);
            let fp = m3_ray_terms(&r, p + h);
            let fm = m3_ray_terms(&r, p - h);
            let g_fd = (fp.0 - fm.0) / (2.0 * h);
            let h_fd = (fp.1 - fm.1) / (2.0 * h);
            assert!(((g - g_fd) / g.abs().max(1.0)).abs() < 1e-6, "p={p}");
            assert!(((hs - h_fd) / hs.abs().max(1.0)).abs() < 1e-6, "p={p}");
        }
    }

    #[test]
    fn m3_scalar_minimizer_matches_stationarity_root() {
        // a=100, b=8, alpha=0.2, N=8: scan B eta over [0, 3].
        let r = ray(100.0, 8.0, 0.2, 8.0);
        let mut best = (f64::INFINITY, 0.0);
        let steps = 300_000;
        for i in 0..=steps {
            let p = 3.0 * i as f64 / steps as f64;
            let (f, _, _) = m3_ray_terms(&r, p);
            if f < best.0 {
                best = (f, p);
            }
        }
        // Oracle: bisection on z r(z) - (N/2) a alpha^2 d^2 as a function of p.
        let g = |p: f64| {
            let d = (-p).exp();
            let z = 0.5 * 8.0 * 8.0 * 0.2 * d;
            z * crate::specfun::bessel_ratio(z).unwrap() - 0.5 * 8.0 * 100.0 * 0.04 * d * d
        };
        let (mut lo, mut hi) = (0.0, 3.0);
        assert!(g(lo) < 0.0 && g(hi) > 0.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((best.1 - lo).abs() < 1e-3, "scan {} vs root {}", best.1, lo);
    }

    #[test]
    fn ray_floor_is_a_lower_bound() {
        for (a, b) in [(100.0, 8.0), (1e4, 2900.0), (50.0, 1.0), (1e4, 10.0)] {
            let r = ray(a, b, 0.3, 8.0);
            let floor = m3_ray_floor(&r);
            for i in -200..400 {
                let p = i as f64 * 0.02;
                assert!(m3_ray_terms(&r, p).0 >= floor - 1e-9 * floor.abs().max(1.0));
            }
        }
    }

    #[test]
    fn m2_terms_reduce_to_m3_with_frozen_attenuation() {
        let r = ray(9000.0, 2100.0, 0.3, 8.0);
        let c0 = m2_ray_terms(&r, r.a, 0.0).loss - m3_ray_terms(&r, 0.0).0;
        for p in [0.05, 0.3, 1.1] {
            let m2 = m2_ray_terms(&r, r.a, p);
            let (f3, g3, h3) = m3_ray_terms(&r, p);
            assert!(((m2.loss - f3) - c0).abs() < 1e-10 * c0.abs());
            assert!((m2.dp - g3).abs() <= 1e-12 * g3.abs().max(1.0));
            assert!((m2.dpp - h3).abs() <= 1e-12 * h3.abs().max(1.0));
        }
    }

    #[test]
    fn m2_terms_match_finite_differences() {
        let r = ray(9000.0, 2100.0, 0.3, 8.0);
        let a_ref = 1e4;
        let f = |q: f64, p: f64| m2_ray_terms(&r, a_ref * (-q).exp(), p);
        for (q, p) in [(0.1, 0.2), (0.5, 0.05), (0.01, 1.0)] {
            let h = 1e-6;
            let t = f(q, p);
            let dq = (f(q + h, p).loss - f(q - h, p).loss) / (2.0 * h);
            let dp = (f(q, p + h).loss - f(q, p - h).loss) / (2.0 * h);
            let dqq = (f(q + h, p).dq - f(q - h, p).dq) / (2.0 * h);
            let dqp = (f(q, p + h).dq - f(q, p - h).dq) / (2.0 * h);
            let dpp = (f(q, p + h).dp - f(q, p - h).dp) / (2.0 * h);
            for (an, fd) in [(t.dq, dq), (t.dp, dp), (t.dqq, dqq), (t.dqp, dqp), (t.dpp, dpp)] {
                assert!((an - fd).abs() < 1e-5 * an.abs().max(1.0), "{an} vs {fd}");
            }
        }
    }

    #[test]
    fn stress_arguments_stay_finite() {
        let r = ray(1e6, 5e5, 0.5, 8.0);
        let (f, g, h) = m3_ray_terms(&r, 0.0);
        assert!(f.is_finite() && g.is_finite() && h.is_finite());
        let t = m2_ray_terms(&r, 1e6, 0.0);
        assert!(t.loss.is_finite() && t.dp.is_finite() && t.dq.is_finite());
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let v = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(v), 2.0);
    }

    #[test]
    fn lipschitz_report_shapes() {
        let m1 = lipschitz_bound(ModelKind::M1, 4.0 * std::f64::consts::PI / 15.0, 4, 1.0).unwrap();
        assert!((m1.safe.unwrap() - 1.0).abs() < 1e-12);
        let m2 = lipschitz_bound(ModelKind::M2, 1.0, 4, 1.0).unwrap();
        assert!(m2.safe.is_none() && m2.nominal.is_none());
    }

    #[test]
    fn measurement_validation_and_sanitation() {
        let ok = MeasurementSet::new(
            1,
            1,
            2,
            8,
            vec![80.0, -1.0],
            vec![8.0, 0.0],
            vec![100.0; 2],
            vec![20.0; 2],
        )
        .unwrap();
        assert_eq!(ok.clamped, 2);
        assert_eq!(ok.clamped_rays, vec![1]);
        assert!((ok.transmission(0) - 0.8).abs() < 1e-15);
        assert!((ok.darkfield(0) - 0.5).abs() < 1e-15);
        assert!(MeasurementSet::new(1, 1, 1, 2, vec![1.0], vec![1.0], vec![2.0], vec![1.0]).is_err());
        assert!(MeasurementSet::new(1, 1, 1, 8, vec![1.0], vec![1.0], vec![2.0], vec![3.0]).is_err());
        assert!(MeasurementSet::new(1, 1, 2, 8, vec![1.0], vec![1.0], vec![2.0], vec![1.0]).is_err());
        assert_eq!("M3".parse::<ModelKind>().unwrap(), ModelKind::M3);
        assert!("m4".parse::<ModelKind>().is_err());
    }
}
