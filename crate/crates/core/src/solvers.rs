//! Reconstruction algorithms for `y = A x + noise` under a flow prior.
//!
//! * [`solve_ictm`]: iterative corrupted trajectory matching. Each Euler step
//!   first refines the current state with `K` Adam iterations on a local MAP
//!   objective, then advances.
//! * [`solve_ictm_no_prior`]: the same loop with the local prior removed.
//! * [`solve_global_map`]: Adam on the initial noise through the unrolled solve.
//! * [`solve_dps_ode`]: Euler sampling with a gradient-guided velocity.

use std::time::Instant;

use crate::error::{FlowError, Result};
use crate::likelihood::{draw_probes, score_from_value, AuxiliaryPath, TraceEstimator};
use crate::operators::LinearOperator;
use crate::optim::Adam;
use crate::schedule::{InterpolationSchedule, TimeClamp};
use crate::tensor::{all_finite, norm, norm_sq, Rng, Tensor};
use crate::velocity::VelocityField;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverVariant {
    Ictm,
    IctmNoPrior,
    GlobalMap,
    DpsOde,
}

impl SolverVariant {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ictm" => Ok(SolverVariant::Ictm),
            "ictm_no_prior" => Ok(SolverVariant::IctmNoPrior),
            "global_map" => Ok(SolverVariant::GlobalMap),
            "dps_ode" => Ok(SolverVariant::DpsOde),
            other => Err(FlowError::config(format!("unknown solver variant '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SolverVariant::Ictm => "ictm",
            SolverVariant::IctmNoPrior => "ictm_no_prior",
            SolverVariant::GlobalMap => "global_map",
            SolverVariant::DpsOde => "dps_ode",
        }
    }
}

/// Weight on `|A x_{t+dt} - y_{t+dt}|^2` in the local objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DataWeight {
    /// The tunable `lambda` (`guidance_weight`).
    Lambda,
    /// `1 / (2 alpha_{t+dt}^2 sigma_y^2)`.
    Exact,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub variant: SolverVariant,
    /// Euler steps `N`.
    pub n_steps: usize,
    /// Inner iterations `K` per step.
    pub inner_iters: usize,
    /// Adam step size `eta` (for DPS-ODE: the guidance scale).
    pub step_size: f64,
    /// `lambda`.
    pub guidance_weight: f64,
    pub sigma_y: f64,
    pub seed: u64,
    pub data_weight: DataWeight,
    pub trace: TraceEstimator,
    pub t_min: f64,
    /// Adam iterations of the global MAP solver.
    pub outer_iters: usize,
    /// Final learning rate of the global MAP solver's cosine decay.
    pub outer_lr_final: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            variant: SolverVariant::Ictm,
            n_steps: 100,
            inner_iters: 10,
            step_size: 1e-2,
            guidance_weight: 1e3,
            sigma_y: 0.1,
            seed: 0,
            data_weight: DataWeight::Lambda,
            trace: TraceEstimator::default(),
            t_min: 1e-3,
            outer_iters: 1000,
            outer_lr_final: 1e-4,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 || self.inner_iters == 0 {
            return Err(FlowError::config("n_steps and inner_iters must be at least 1"));
        }
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err(FlowError::config(format!("step size must be >= 0, got {}", self.step_size)));
        }
        if !(self.guidance_weight >= 0.0) || !self.guidance_weight.is_finite() {
            return Err(FlowError::config(format!(
                "guidance weight must be >= 0, got {}",
                self.guidance_weight
            )));
        }
        if !(self.sigma_y >= 0.0) {
            return Err(FlowError::config(format!("sigma_y must be >= 0, got {}", self.sigma_y)));
        }
        if self.data_weight == DataWeight::Exact && !(self.sigma_y > 0.0 && self.sigma_y.is_finite()) {
            return Err(FlowError::config("exact data weight needs a finite positive sigma_y"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    /// Local objective at the refined state (prior omitted when no density is available).
    pub objective: f64,
    /// `|A x_{t+dt} - y_{t+dt}|`.
    pub residual: f64,
    pub trace: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult {
    pub x1: Tensor,
    /// Initial noise draw.
    pub x0: Vec<f64>,
    pub per_step: Vec<StepRecord>,
    pub wall_time: f64,
    /// `max_t |x_t - (alpha_t x1 + beta_t x0)|` over the Euler grid.
    pub path_deviation: f64,
}

pub fn solve(
    cfg: &SolverConfig,
    field: &dyn VelocityField,
    s: InterpolationSchedule,
    a: &dyn LinearOperator,
    y: &Tensor,
    rng: &Rng,
) -> Result<ReconstructionResult> {
    match cfg.variant {
        SolverVariant::Ictm => solve_ictm(cfg, field, s, a, y, rng),
        SolverVariant::IctmNoPrior => solve_ictm_no_prior(cfg, field, s, a, y, rng),
        SolverVariant::GlobalMap => solve_global_map(cfg, field, s, a, y, rng),
        SolverVariant::DpsOde => solve_dps_ode(cfg, field, s, a, y, rng),
    }
}

fn check_shapes(field: &dyn VelocityField, a: &dyn LinearOperator, y: &Tensor) -> Result<()> {
    if field.dim() != a.in_len() {
        return Err(FlowError::shape(format!(
            "field dimension {} but operator input {:?}",
            field.dim(),
            a.in_shape()
        )));
    }
    y.ensure_shape(a.out_shape(), "measurement")
}

fn initial_noise(field: &dyn VelocityField, rng: &Rng) -> Vec<f64> {
    rng.fork("init-noise").normal_vec(field.dim())
}

fn step_forward(x: &[f64], v: &[f64], dt: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(a, b)| a + b * dt).collect()
}

fn max_path_deviation(states: &[Vec<f64>], s: InterpolationSchedule) -> f64 {
    let n = states.len() - 1;
    let (x0, x1) = (&states[0], &states[n]);
    states
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let t = i as f64 / n as f64;
            let (al, be) = (s.alpha(t), s.beta(t));
            let d: Vec<f64> = (0..x.len()).map(|k| x[k] - (al * x1[k] + be * x0[k])).collect();
            norm(&d)
        })
        .fold(0.0, f64::max)
}

fn finish(
    a: &dyn LinearOperator,
    states: Vec<Vec<f64>>,
    per_step: Vec<StepRecord>,
    s: InterpolationSchedule,
    start: Instant,
) -> Result<ReconstructionResult> {
    let path_deviation = max_path_deviation(&states, s);
    let x0 = states[0].clone();
    let x1 = Tensor::new(a.in_shape().to_vec(), states.last().unwrap().clone())?;
    Ok(ReconstructionResult {
        x1,
        x0,
        per_step,
        wall_time: start.elapsed().as_secs_f64(),
        path_deviation,
    })
}

/// Gradient of `tr(dv/dx)` at `x`: exact over the basis or averaged over probes.
fn trace_gradient(field: &dyn VelocityField, x: &[f64], t: f64, probes: Option<&[Vec<f64>]>) -> Vec<f64> {
    let d = field.dim();
    let mut g = vec![0.0; d];
    if field.jacobian_is_state_independent() {
        return g;
    }
    match probes {
        Some(ps) => {
            for e in ps {
                let gi = field.grad_of_jvp_probe(x, t, e);
                g.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
            }
            let inv = 1.0 / ps.len() as f64;
            g.iter_mut().for_each(|a| *a *= inv);
        }
        None => {
            let mut e = vec![0.0; d];
            for k in 0..d {
                e[k] = 1.0;
                let gi = field.grad_of_jvp_probe(x, t, &e);
                g.iter_mut().zip(&gi).for_each(|(a, b)| *a += b);
                e[k] = 0.0;
            }
        }
    }
    g
}

fn trace_value(field: &dyn VelocityField, x: &[f64], t: f64, probes: Option<&[Vec<f64>]>) -> f64 {
    match probes {
        Some(ps) => crate::likelihood::hutchinson_trace(field, x, t, ps),
        None => field.exact_trace(x, t),
    }
}

fn ictm_loop(
    cfg: &SolverConfig,
    field: &dyn VelocityField,
    s: InterpolationSchedule,
    a: &dyn LinearOperator,
    y: &Tensor,
    rng: &Rng,
    with_prior: bool,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    check_shapes(field, a, y)?;
    let start = Instant::now();
    let n = cfg.n_steps;
    let dt = 1.0 / n as f64;
    let clamp = TimeClamp::for_steps(cfg.t_min.min(dt), n);
    let probe_rng = rng.fork("probes");

    let x0 = initial_noise(field, rng);
    let path = AuxiliaryPath::new(y.data().to_vec(), a.forward(&x0), s)?;
    let mut x = x0;
    let mut states = Vec::with_capacity(n + 1);
    states.push(x.clone());
    let mut per_step = Vec::with_capacity(n);
    let mut opt = Adam::new(x.len(), cfg.step_size);

    for i in 0..n {
        let t = i as f64 * dt;
        let t_next = (i + 1) as f64 * dt;
        let y_next = path.at(t_next);
        let lw = match cfg.data_weight {
            DataWeight::Lambda => cfg.guidance_weight,
            DataWeight::Exact => {
                let al = s.alpha(t_next);
                1.0 / (2.0 * al * al * cfg.sigma_y * cfg.sigma_y)
            }
        };
        let probes = if with_prior {
            cfg.trace
                .probes_for(x.len())
                .map(|p| draw_probes(x.len(), p, &mut probe_rng.substream(i as u64)))
        } else {
            None
        };
        let probes = probes.as_deref();

        // tentative step; the refined state is advanced again below
        let _tentative = step_forward(&x, &field.eval(&x, t), dt);

        opt.reset();
        for k in 0..cfg.inner_iters {
            let mut resid = Vec::new();
            let (v, mut grad) = field.eval_then_vjp(&x, t, &mut |v| {
                let u = step_forward(&x, v, dt);
                resid = a.forward(&u).iter().zip(&y_next).map(|(p, q)| p - q).collect();
                let g = a.transpose(&resid);
                g.into_iter().map(|gi| 2.0 * lw * gi * dt).collect()
            });
            // d/dx of lambda |A(x + v dt) - y|^2 = g_u + dt J^T g_u with g_u = 2 lambda A^T r
            let g_u = a.transpose(&resid);
            for (gk, gu) in grad.iter_mut().zip(&g_u) {
                *gk += 2.0 * lw * gu;
            }
            if with_prior {
                if i == 0 {
                    grad.iter_mut().zip(&x).for_each(|(g, xi)| *g += xi);
                } else {
                    let score = score_from_value(&v, &x, t, s, &clamp)?;
                    grad.iter_mut().zip(&score).for_each(|(g, sc)| *g -= sc);
                }
                let tg = trace_gradient(field, &x, t, probes);
                grad.iter_mut().zip(&tg).for_each(|(g, h)| *g += h * dt);
            }
            opt.step(&mut x, &grad);
            if !all_finite(&x) {
                return Err(FlowError::DivergedSolve { step: i, inner: k });
            }
        }

        let v = field.eval(&x, t);
        let x_next = step_forward(&x, &v, dt);
        let resid: Vec<f64> = a.forward(&x_next).iter().zip(&y_next).map(|(p, q)| p - q).collect();
        let mut objective = lw * norm_sq(&resid);
        let trace = if with_prior {
            let tr = trace_value(field, &x, t, probes);
            objective += tr * dt;
            if i == 0 {
                objective += 0.5 * norm_sq(&x);
            } else if let Some(lp) = field.log_density(&x, t) {
                objective -= lp;
            }
            Some(tr)
        } else {
            None
        };
        if !all_finite(&x_next) {
            return Err(FlowError::DivergedSolve { step: i, inner: cfg.inner_iters });
        }
        per_step.push(StepRecord {
            t,
            objective,
            residual: norm(&resid),
            trace,
        });
        x = x_next;
        states.push(x.clone());
    }
    finish(a, states, per_step, s, start)
}

pub fn solve_ictm(
    cfg: &SolverConfig,
    field: &dyn VelocityField,
    s: InterpolationSchedule,
    a: &dyn LinearOperator,
    y: &Tensor,
    rng: &Rng,
) -> Result<ReconstructionResult> {
    ictm_loop(cfg, field, s, a, y, rng, true)
}

pub fn solve_ictm_no_prior(
    cfg: &SolverConfig,
    field: &dyn VelocityField,
    s: InterpolationSchedule,
    a: &dyn LinearOperator,
    y: &Tensor,
    rng: &Rng,
) -> Result<ReconstructionResult> {
    ictm_loop(cfg, field, s, a, y, rng, false)
}

pub const GLOBAL_MAP_MAX_DIM: usize = 64;

/// `(1/(2 sigma_y^2)) |y - A x1(x0)|^2 + |x0|^2 / 2 + sum_i tr(dv/dx)(x_i, t_i) dt`
/// and its gradient with respect to `x0`, by a reverse sweep over the Euler states.
pub fn global_map_objective(
    field: &dyn VelocityField,
    a: &dyn LinearOperator,
    y: &[f64],
    sigma_y: f64,
    x0: &[f64],
    n_steps: usize,
) -> (f64, Vec<f64>) {
    let dt = 1.0 / n_steps as f64;
    let w = if sigma_y.is_finite() { 1.0 / (2.0 * sigma_y * sigma_y) } else { 0.0 };
    let state_dep = !field.jacobian_is_state_independent();
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut x = x0.to_vec();
    let mut trace_sum = 0.0;
    for i in 0..n_steps {
        let t = i as f64 * dt;
        trace_sum += field.exact_trace(&x, t) * dt;
        let v = field.eval(&x, t);
        let next = step_forward(&x, &v, dt);
        states.push(x);
        x = next;
    }
    let resid: Vec<f64> = a.forward(&x).iter().zip(y).map(|(p, q)| p - q).collect();
    let loss = w * norm_sq(&resid) + 0.5 * norm_sq(x0) + trace_sum;

    let mut adj: Vec<f64> = a.transpose(&resid).into_iter().map(|g| 2.0 * w * g).collect();
    for i in (0..n_steps).rev() {
        let t = i as f64 * dt;
        let xi = &states[i];
        let pulled = field.vjp(xi, t, &adj);
        for (g, p) in adj.iter_mut().zip(&pulled) {
            *g += dt * p;
        }
        if state_dep {
            let tg = trace_gradient(field, xi, t, None);
            adj.iter_mut().zip(&tg).for_each(|(g, h)| *g += dt * h);
        }
    }
    adj.iter_mut().zip(x0).for_each(|(g, xi)| *g += xi);
    (loss, adj)
}

/// Adam on `x0` for `cfg.outer_iters` iterations, with a cosine decay of the
/// step size from `cfg.step_size` to `cfg.outer_lr_final`.
pub fn solve_global_map(
    cfg: &SolverConfig,
    field: &dyn VelocityField,
    s: InterpolationSchedule,
    a: &dyn LinearOperator,
    y: &Tensor,
    rng: &Rng,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    check_shapes(field, a, y)?;
    if field.dim() > GLOBAL_MAP_MAX_DIM {
        return Err(FlowError::config(format!(
            "global MAP differentiates through the solver and is limited to dimension {GLOBAL_MAP_MAX_DIM}, got {}",
            field.dim()
        )));
    }
    let start = Instant::now();
    let n = cfg.n_steps;
    let dt = 1.0 / n as f64;
    let mut x0 = initial_noise(field, rng);
    let mut opt = Adam::new(x0.len(), cfg.step_size);
    let iters = cfg.outer_iters;
    let lr_final = cfg.outer_lr_final.min(cfg.step_size);
    for k in 0..iters {
        let (loss, grad) = global_map_objective(field, a, y.data(), cfg.sigma_y, &x0, n);
        if !loss.is_finite() || !all_finite(&grad) {
            return Err(FlowError::DivergedSolve { step: 0, inner: k });
        }
        let progress = k as f64 / (iters.max(2) - 1) as f64;
        opt.lr = lr_final
            + 0.5 * (cfg.step_size - lr_final) * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.step(&mut x0, &grad);
    }

    let path = AuxiliaryPath::new(y.data().to_vec(), a.forward(&x0), s)?;
    let mut x = x0;
    let mut states = vec![x.clone()];
    let mut per_step = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let tr = field.exact_trace(&x, t);
        x = step_forward(&x, &field.eval(&x, t), dt);
        if !all_finite(&x) {
            return Err(FlowError::DivergedSolve { step: i, inner: 0 });
        }
        let resid: Vec<f64> = a.forward(&x).iter().zip(path.at((i + 1) as f64 * dt)).map(|(p, q)| p - q).collect();
        per_step.push(StepRecord {
            t,
            objective: norm_sq(&resid),
            residual: norm(&resid),
            trace: Some(tr),
        });
        states.push(x.clone());
    }
    finish(a, states, per_step, s, start)
}

/// Euler sampling with `v + zeta_t grad_x(-|y - A x1_hat(x)|^2)`, where
/// `x1_hat = x + (1 - t) v` and `zeta_t = eta / (2 |y - A x1_hat|)`.
pub fn solve_dps_ode(
    cfg: &SolverConfig,
    field: &dyn VelocityField,
    s: InterpolationSchedule,
    a: &dyn LinearOperator,
    y: &Tensor,
    rng: &Rng,
) -> Result<ReconstructionResult> {
    cfg.validate()?;
    check_shapes(field, a, y)?;
    if !s.is_straight() {
        return Err(FlowError::config("DPS-ODE's one-step estimate assumes the OT schedule"));
    }
    let start = Instant::now();
    let n = cfg.n_steps;
    let dt = 1.0 / n as f64;
    let eta = cfg.step_size;
    let x0 = initial_noise(field, rng);
    let path = AuxiliaryPath::new(y.data().to_vec(), a.forward(&x0), s)?;
    let mut x = x0;
    let mut states = vec![x.clone()];
    let mut per_step = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 * dt;
        let h = 1.0 - t;
        let mut r_norm = 0.0;
        let next = if eta == 0.0 {
            let v = field.eval(&x, t);
            r_norm = norm(&sub_measure(a, &x, &v, h, y.data()));
            step_forward(&x, &v, dt)
        } else {
            let mut g_r = Vec::new();
            let (v, pulled) = field.eval_then_vjp(&x, t, &mut |v| {
                let r = sub_measure(a, &x, v, h, y.data());
                r_norm = norm(&r);
                g_r = a.transpose(&r);
                g_r.iter().map(|g| h * g).collect()
            });
            let zeta = eta / (2.0 * r_norm.max(1e-12));
            let guided: Vec<f64> = (0..x.len())
                .map(|k| v[k] + zeta * 2.0 * (g_r[k] + pulled[k]))
                .collect();
            step_forward(&x, &guided, dt)
        };
        if !all_finite(&next) {
            return Err(FlowError::DivergedSolve { step: i, inner: 0 });
        }
        let resid: Vec<f64> = a.forward(&next).iter().zip(path.at((i + 1) as f64 * dt)).map(|(p, q)| p - q).collect();
        per_step.push(StepRecord {
            t,
            objective: r_norm * r_norm,
            residual: norm(&resid),
            trace: None,
        });
        x = next;
        states.push(x.clone());
    }
    finish(a, states, per_step, s, start)
}

/// `y - A (x + h v)`
fn sub_measure(a: &dyn LinearOperator, x: &[f64], v: &[f64], h: f64, y: &[f64]) -> Vec<f64> {
    let x1: Vec<f64> = x.iter().zip(v).map(|(p, q)| p + h * q).collect();
    y.iter().zip(a.forward(&x1)).map(|(p, q)| p - q).collect()
}
