//! Iterative solvers: CGLS for the linear model, nonlinear CG, L-BFGS and
//! the fast gradient method for the smooth objectives.
//!
//! Every solver returns the final iterate together with a
//! [`ConvergenceLog`]. Record 0 describes the starting point; record `k`
//! describes the iterate after `k` completed iterations.

use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Evaluation, Objective};
use crate::projector::LinearOperator;
use crate::vecops::{all_finite, axpy, dot, norm};

/// Smallest step returned by the Newton-Raphson line search.
pub const MIN_STEP: f64 = 1e-12;
/// Step used when the line search meets nonpositive curvature.
pub const FALLBACK_STEP: f64 = 1e-3;
/// First Barzilai-Borwein step, before any curvature pair exists.
pub const BB_BOOTSTRAP_STEP: f64 = 1e-6;
/// A run is declared divergent once the loss rises this many times the
/// magnitude of the initial loss above it.
pub const DIVERGENCE_FACTOR: f64 = 1e3;
/// ... or once it stays above the initial loss for this many consecutive
/// iterations. Losses that saturate (m3 as `d -> 0`) never reach the
/// factor above.
pub const DIVERGENCE_PATIENCE: usize = 5;
const PAIR_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    Cgls,
    Nlcg,
    Lbfgs,
    Fgm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LineSearch {
    NewtonRaphson,
    BarzilaiBorwein,
    None,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cgls" => Ok(Algorithm::Cgls),
            "nlcg" => Ok(Algorithm::Nlcg),
            "lbfgs" | "l-bfgs" => Ok(Algorithm::Lbfgs),
            "fgm" => Ok(Algorithm::Fgm),
            other => Err(Error::invalid(format!("unknown algorithm `{other}`"))),
        }
    }
}

impl std::str::FromStr for LineSearch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "newton_raphson" | "nr" => Ok(LineSearch::NewtonRaphson),
            "barzilai_borwein" | "bb" => Ok(LineSearch::BarzilaiBorwein),
            "none" => Ok(LineSearch::None),
            other => Err(Error::invalid(format!("unknown line search `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub max_iters: usize,
    /// Stop once `||g|| <= grad_tol * ||g_0||`.
    pub grad_tol: f64,
    pub line_search: LineSearch,
    pub ls_iters: usize,
    pub lbfgs_memory: usize,
    pub fgm_step: Option<f64>,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Lbfgs,
            max_iters: 100,
            grad_tol: 1e-8,
            line_search: LineSearch::NewtonRaphson,
            ls_iters: 1,
            lbfgs_memory: 10,
            fgm_step: None,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn new(algorithm: Algorithm, max_iters: usize) -> Self {
        Self {
            algorithm,
            max_iters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ls_iters < 1 {
            return Err(Error::invalid("ls_iters must be at least 1"));
        }
        if self.lbfgs_memory < 1 {
            return Err(Error::invalid("lbfgs_memory must be at least 1"));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(Error::invalid("grad_tol must be nonnegative"));
        }
        if let Some(step) = self.fgm_step {
            if !(step > 0.0) || !step.is_finite() {
                return Err(Error::invalid(format!("fgm_step must be positive, got {step}")));
            }
        }
        if self.algorithm == Algorithm::Fgm && self.fgm_step.is_none() {
            return Err(Error::invalid("fgm needs fgm_step"));
        }
        Ok(())
    }

    /// Whether the FGM step lies inside `(0, 2/L)` for a known bound `L`.
    pub fn fgm_step_within(&self, lipschitz: f64) -> bool {
        self.fgm_step.is_some_and(|s| s > 0.0 && s < 2.0 / lipschitz)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIterations,
    /// CGLS met a zero denominator.
    Breakdown,
    NonFinite,
    Diverged,
}

impl fmt::Display for RunStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RunStatus::Converged => "converged",
            RunStatus::MaxIterations => "max_iterations",
            RunStatus::Breakdown => "breakdown",
            RunStatus::NonFinite => "non_finite",
            RunStatus::Diverged => "diverged",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub step: f64,
    pub time_s: f64,
    pub violations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceLog {
    pub records: Vec<IterationRecord>,
    pub status: RunStatus,
    /// Line searches that fell back to [`FALLBACK_STEP`].
    pub line_search_fallbacks: usize,
    /// Nonlinear CG or L-BFGS restarts along the steepest descent direction.
    pub restarts: usize,
    #[serde(skip)]
    started: Option<Instant>,
    #[serde(skip)]
    above_initial: usize,
}

impl ConvergenceLog {
    fn start() -> Self {
        Self {
            records: Vec::new(),
            status: RunStatus::MaxIterations,
            line_search_fallbacks: 0,
            restarts: 0,
            started: Some(Instant::now()),
            above_initial: 0,
        }
    }

    fn push(&mut self, loss: f64, grad_norm: f64, step: f64, violations: usize) {
        let time_s = self.started.map_or(0.0, |t| t.elapsed().as_secs_f64());
        let time_s = self.records.last().map_or(time_s, |r| r.time_s.max(time_s));
        self.records.push(IterationRecord {
            iter: self.records.len(),
            loss,
            grad_norm,
            step,
            time_s,
            violations,
        });
    }

    /// Completed iterations, excluding the starting record.
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }

    pub fn initial_loss(&self) -> Option<f64> {
        self.records.first().map(|r| r.loss)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.records.last().map(|r| r.loss)
    }

    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    /// Checks record numbering and wall-time ordering.
    pub fn check_invariants(&self) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            if r.iter != i {
                return Err(Error::invalid(format!("record {i} is numbered {}", r.iter)));
            }
            if i > 0 && r.time_s < self.records[i - 1].time_s {
                return Err(Error::invalid(format!("wall time decreases at record {i}")));
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,loss,grad_norm,step,time_s,violations\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iter, r.loss, r.grad_norm, r.step, r.time_s, r.violations
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn diverged(loss: f64, initial: f64) -> bool {
    loss - initial > DIVERGENCE_FACTOR * initial.abs().max(f64::MIN_POSITIVE)
}

// ---------------------------------------------------------------------------
// CGLS

/// Conjugate gradients on the normal equations of `min 1/2 ||op x - rhs||^2`.
pub fn cgls(
    op: &dyn LinearOperator,
    rhs: &[f64],
    x0: Option<&[f64]>,
    config: &OptimizerConfig,
) -> Result<(Vec<f64>, ConvergenceLog)> {
    config.validate()?;
    if rhs.len() != op.range_len() {
        return Err(Error::shape(format!(
            "right-hand side has {} entries, operator range is {}",
            rhs.len(),
            op.range_len()
        )));
    }
    let mut x = match x0 {
        Some(x0) if x0.len() != op.domain_len() => {
            return Err(Error::shape("starting point does not match the operator domain"))
        }
        Some(x0) => x0.to_vec(),
        None => vec![0.0; op.domain_len()],
    };
    let mut log = ConvergenceLog::start();
    let mut r = rhs.to_vec();
    if x0.is_some() {
        let ax = op.apply(&x);
        r.iter_mut().zip(&ax).for_each(|(r, a)| *r -= a);
    }
    let violations = |r: &[f64]| r.iter().zip(rhs).filter(|(r, b)| *b - *r < 0.0).count();
    let mut s = op.apply_adjoint(&r);
    let mut p = s.clone();
    let mut gamma = dot(&s, &s);
    let g0 = gamma.sqrt();
    log.push(0.5 * dot(&r, &r), g0, 0.0, violations(&r));
    if g0 == 0.0 {
        log.status = RunStatus::Converged;
        return Ok((x, log));
    }
    for _ in 0..config.max_iters {
        let q = op.apply(&p);
        let delta = dot(&q, &q);
        if !(delta > 0.0) || !delta.is_finite() {
            log.status = RunStatus::Breakdown;
            return Ok((x, log));
        }
        let alpha = gamma / delta;
        axpy(&mut x, alpha, &p);
        axpy(&mut r, -alpha, &q);
        s = op.apply_adjoint(&r);
        let gamma_new = dot(&s, &s);
        log.push(0.5 * dot(&r, &r), gamma_new.sqrt(), alpha, violations(&r));
        if !gamma_new.is_finite() {
            log.status = RunStatus::NonFinite;
            return Ok((x, log));
        }
        if gamma_new.sqrt() <= config.grad_tol * g0 {
            log.status = RunStatus::Converged;
            return Ok((x, log));
        }
        let beta = gamma_new / gamma;
        gamma = gamma_new;
        p.iter_mut().zip(&s).for_each(|(p, s)| *p = s + beta * *p);
    }
    Ok((x, log))
}

// ---------------------------------------------------------------------------
// Line searches

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub step: f64,
    /// Nonpositive curvature was met and [`FALLBACK_STEP`] returned.
    pub fallback: bool,
}

/// Newton-Raphson iterations on `phi(t) = f(x + t dir)` starting at `t = 0`.
pub fn newton_raphson_ls(
    model: &dyn Objective,
    x: &[f64],
    direction: &[f64],
    n_iters: usize,
) -> Result<LineSearchOutcome> {
    let eval = model.evaluate(x);
    newton_raphson_from(model, &eval, x, direction, n_iters)
}

fn newton_raphson_from(
    model: &dyn Objective,
    eval: &Evaluation,
    x: &[f64],
    direction: &[f64],
    n_iters: usize,
) -> Result<LineSearchOutcome> {
    let slope = dot(&eval.grad, direction);
    if !(slope < 0.0) {
        return Err(Error::invalid(format!(
            "line search needs a descent direction, got slope {slope}"
        )));
    }
    let mut t = 0.0;
    for i in 0..n_iters.max(1) {
        let (d1, d2) = if i == 0 {
            (slope, model.curvature_at(eval, x, direction))
        } else {
            let mut xt = x.to_vec();
            axpy(&mut xt, t, direction);
            let e = model.evaluate(&xt);
            (dot(&e.grad, direction), model.curvature_at(&e, &xt, direction))
        };
        if !(d2 > 0.0) || !d2.is_finite() || !d1.is_finite() {
            return Ok(LineSearchOutcome {
                step: FALLBACK_STEP,
                fallback: true,
            });
        }
        t -= d1 / d2;
    }
    Ok(LineSearchOutcome {
        step: t.max(MIN_STEP),
        fallback: false,
    })
}

/// BB1 step `<s,s>/<s,y>` with `s = x - prev_x` and `y = g - prev_g`.
pub fn barzilai_borwein_step(prev_x: &[f64], prev_g: &[f64], x: &[f64], g: &[f64]) -> f64 {
    let mut ss = 0.0;
    let mut sy = 0.0;
    for i in 0..x.len() {
        let s = x[i] - prev_x[i];
        let y = g[i] - prev_g[i];
        ss += s * s;
        sy += s * y;
    }
    let step = ss / sy;
    if sy > 0.0 && step.is_finite() && step > 0.0 {
        step
    } else {
        BB_BOOTSTRAP_STEP
    }
}

struct StepChooser<'a> {
    config: &'a OptimizerConfig,
    prev: Option<(Vec<f64>, Vec<f64>)>,
}

impl StepChooser<'_> {
    fn step(
        &mut self,
        model: &dyn Objective,
        eval: &Evaluation,
        x: &[f64],
        dir: &[f64],
        log: &mut ConvergenceLog,
    ) -> Result<f64> {
        let step = match self.config.line_search {
            LineSearch::NewtonRaphson => {
                let out = newton_raphson_from(model, eval, x, dir, self.config.ls_iters)?;
                if out.fallback {
                    log.line_search_fallbacks += 1;
                }
                out.step
            }
            LineSearch::BarzilaiBorwein => match &self.prev {
                Some((px, pg)) => barzilai_borwein_step(px, pg, x, &eval.grad),
                None => BB_BOOTSTRAP_STEP,
            },
            LineSearch::None => 1.0,
        };
        if self.config.line_search == LineSearch::BarzilaiBorwein {
            self.prev = Some((x.to_vec(), eval.grad.clone()));
        }
        Ok(step)
    }
}

fn check_start(model: &dyn Objective, x0: &[f64], config: &OptimizerConfig) -> Result<()> {
    config.validate()?;
    if x0.len() != model.dim() {
        return Err(Error::shape(format!(
            "starting point has {} entries, model expects {}",
            x0.len(),
            model.dim()
        )));
    }
    Ok(())
}

/// Shared bookkeeping after a step; returns `Some(status)` when the run ends.
fn after_step(log: &mut ConvergenceLog, eval: &Evaluation, step: f64, g0: f64, tol: f64) -> Option<RunStatus> {
    let gn = norm(&eval.grad);
    log.push(eval.loss, gn, step, eval.violations);
    let initial = log.records[0].loss;
    if eval.loss > initial {
        log.above_initial += 1;
    } else {
        log.above_initial = 0;
    }
    if !eval.loss.is_finite() || !all_finite(&eval.grad) {
        Some(RunStatus::NonFinite)
    } else if diverged(eval.loss, initial) || log.above_initial >= DIVERGENCE_PATIENCE {
        Some(RunStatus::Diverged)
    } else if gn <= tol * g0 {
        Some(RunStatus::Converged)
    } else {
        None
    }
}

fn start_log(eval: &Evaluation) -> (ConvergenceLog, f64) {
    let mut log = ConvergenceLog::start();
    let g0 = norm(&eval.grad);
    log.push(eval.loss, g0, 0.0, eval.violations);
    if !eval.loss.is_finite() || !all_finite(&eval.grad) {
        log.status = RunStatus::NonFinite;
    } else if g0 == 0.0 {
        log.status = RunStatus::Converged;
    }
    (log, g0)
}

// ---------------------------------------------------------------------------
// Nonlinear CG

/// Polak-Ribiere+ nonlinear conjugate gradients.
pub fn nlcg(model: &dyn Objective, x0: &[f64], config: &OptimizerConfig) -> Result<(Vec<f64>, ConvergenceLog)> {
    check_start(model, x0, config)?;
    let mut x = x0.to_vec();
    let mut eval = model.evaluate(&x);
    let (mut log, g0) = start_log(&eval);
    if log.status != RunStatus::MaxIterations {
        return Ok((x, log));
    }
    let mut dir: Vec<f64> = eval.grad.iter().map(|g| -g).collect();
    let mut chooser = StepChooser { config, prev: None };
    for _ in 0..config.max_iters {
        if !(dot(&eval.grad, &dir) < 0.0) {
            log.restarts += 1;
            dir = eval.grad.iter().map(|g| -g).collect();
        }
        let step = chooser.step(model, &eval, &x, &dir, &mut log)?;
        let mut x_new = x.clone();
        axpy(&mut x_new, step, &dir);
        let new = model.evaluate(&x_new);
        if let Some(status) = after_step(&mut log, &new, step, g0, config.grad_tol) {
            log.status = status;
            if status == RunStatus::Converged {
                x = x_new;
            }
            return Ok((x, log));
        }
        let gg = dot(&eval.grad, &eval.grad);
        let beta = ((dot(&new.grad, &new.grad) - dot(&new.grad, &eval.grad)) / gg).max(0.0);
        dir.iter_mut().zip(&new.grad).for_each(|(d, g)| *d = -g + beta * *d);
        x = x_new;
        eval = new;
    }
    Ok((x, log))
}

// ---------------------------------------------------------------------------
// L-BFGS

/// Limited-memory BFGS with the two-loop recursion.
pub fn lbfgs(model: &dyn Objective, x0: &[f64], config: &OptimizerConfig) -> Result<(Vec<f64>, ConvergenceLog)> {
    check_start(model, x0, config)?;
    let mut x = x0.to_vec();
    let mut eval = model.evaluate(&x);
    let (mut log, g0) = start_log(&eval);
    if log.status != RunStatus::MaxIterations {
        return Ok((x, log));
    }
    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::new();
    let mut chooser = StepChooser { config, prev: None };
    for _ in 0..config.max_iters {
        let mut dir = two_loop(&eval.grad, &pairs);
        if !(dot(&eval.grad, &dir) < 0.0) {
            log.restarts += 1;
            pairs.clear();
            dir = eval.grad.iter().map(|g| -g).collect();
        }
        let step = chooser.step(model, &eval, &x, &dir, &mut log)?;
        let mut x_new = x.clone();
        axpy(&mut x_new, step, &dir);
        let new = model.evaluate(&x_new);
        if let Some(status) = after_step(&mut log, &new, step, g0, config.grad_tol) {
            log.status = status;
            if status == RunStatus::Converged {
                x = x_new;
            }
            return Ok((x, log));
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = new.grad.iter().zip(&eval.grad).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > PAIR_TOL * norm(&s) * norm(&y) {
            if pairs.len() == config.lbfgs_memory {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        x = x_new;
        eval = new;
    }
    Ok((x, log))
}

fn two_loop(g: &[f64], pairs: &VecDeque<(Vec<f64>, Vec<f64>, f64)>) -> Vec<f64> {
    let mut q: Vec<f64> = g.iter().map(|g| -g).collect();
    let mut alphas = vec![0.0; pairs.len()];
    for (i, (s, y, rho)) in pairs.iter().enumerate().rev() {
        alphas[i] = rho * dot(s, &q);
        axpy(&mut q, -alphas[i], y);
    }
    if let Some((s, y, _)) = pairs.back() {
        let gamma = dot(s, y) / dot(y, y);
        q.iter_mut().for_each(|v| *v *= gamma);
    }
    for (i, (s, y, rho)) in pairs.iter().enumerate() {
        let beta = rho * dot(y, &q);
        axpy(&mut q, alphas[i] - beta, s);
    }
    q
}

// ---------------------------------------------------------------------------
// FGM

/// Constant-step Nesterov iteration.
///
/// The gradient is taken at the extrapolated point; the logged loss and
/// violations belong to the main iterate.
pub fn fgm(model: &dyn Objective, x0: &[f64], config: &OptimizerConfig) -> Result<(Vec<f64>, ConvergenceLog)> {
    check_start(model, x0, config)?;
    let step = config.fgm_step.ok_or_else(|| Error::invalid("fgm needs fgm_step"))?;
    let mut x = x0.to_vec();
    let mut eval_y = model.evaluate(&x);
    let (mut log, g0) = start_log(&eval_y);
    if log.status != RunStatus::MaxIterations {
        return Ok((x, log));
    }
    let mut y = x.clone();
    let mut t = 1.0_f64;
    for _ in 0..config.max_iters {
        let mut x_new = y.clone();
        axpy(&mut x_new, -step, &eval_y.grad);
        let t_new = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let momentum = (t - 1.0) / t_new;
        y = x_new.iter().zip(&x).map(|(a, b)| a + momentum * (a - b)).collect();
        let loss = model.loss(&x_new);
        let violations = model.violations(&x_new);
        eval_y = model.evaluate(&y);
        let record = Evaluation {
            loss,
            grad: std::mem::take(&mut eval_y.grad),
            violations,
            curvature_terms: Vec::new(),
        };
        let status = after_step(&mut log, &record, step, g0, config.grad_tol);
        eval_y.grad = record.grad;
        x = x_new;
        t = t_new;
        if let Some(status) = status {
            log.status = status;
            return Ok((x, log));
        }
    }
    Ok((x, log))
}

/// Runs the configured algorithm on a smooth objective.
pub fn run(model: &dyn Objective, x0: &[f64], config: &OptimizerConfig) -> Result<(Vec<f64>, ConvergenceLog)> {
    match config.algorithm {
        Algorithm::Nlcg => nlcg(model, x0, config),
        Algorithm::Lbfgs => lbfgs(model, x0, config),
        Algorithm::Fgm => fgm(model, x0, config),
        Algorithm::Cgls => Err(Error::invalid("cgls runs on a linear operator, not an objective")),
    }
}
