//! Divergence estimation, change-of-variables log-likelihood along Euler
//! trajectories, velocity-to-score conversion, and the measurement
//! likelihood along the auxiliary path `y_s = alpha_s y + beta_s A x0`.

use std::f64::consts::PI;

use crate::error::{FlowError, Result};
use crate::operators::LinearOperator;
use crate::schedule::{snr_terms, InterpolationSchedule, TimeClamp};
use crate::tensor::{all_finite, dot, norm_sq, Rng, SpdMatrix};
use crate::velocity::{GaussianDataPrior, VelocityField};

/// How `tr(dv/dx)` is obtained.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceEstimator {
    /// Sum of `d` basis JVPs (or the field's closed form).
    Exact,
    /// Mean of `eps^T J eps` over Rademacher probes.
    Hutchinson { probes: usize },
    /// Exact up to `exact_threshold` dimensions, Hutchinson above.
    Auto { exact_threshold: usize, probes: usize },
}

impl Default for TraceEstimator {
    fn default() -> Self {
        TraceEstimator::Auto {
            exact_threshold: 64,
            probes: 16,
        }
    }
}

impl TraceEstimator {
    /// Number of Hutchinson probes used in dimension `d`, or `None` for exact.
    pub fn probes_for(&self, d: usize) -> Option<usize> {
        match *self {
            TraceEstimator::Exact => None,
            TraceEstimator::Hutchinson { probes } => Some(probes.max(1)),
            TraceEstimator::Auto {
                exact_threshold,
                probes,
            } => (d > exact_threshold).then_some(probes.max(1)),
        }
    }
}

pub fn draw_probes(d: usize, count: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..count).map(|_| rng.rademacher_vec(d)).collect()
}

/// Mean of `eps^T (dv/dx) eps` over the given probes.
pub fn hutchinson_trace(f: &dyn VelocityField, x: &[f64], t: f64, probes: &[Vec<f64>]) -> f64 {
    let sum: f64 = probes.iter().map(|e| dot(e, &f.jvp(x, t, e))).sum();
    sum / probes.len() as f64
}

pub fn trace_jacobian(
    f: &dyn VelocityField,
    x: &[f64],
    t: f64,
    est: TraceEstimator,
    rng: &mut Rng,
) -> f64 {
    match est.probes_for(f.dim()) {
        None => f.exact_trace(x, t),
        Some(p) => hutchinson_trace(f, x, t, &draw_probes(f.dim(), p, rng)),
    }
}

/// `log N(x; 0, I)` including the normalising constant.
pub fn standard_normal_log_density(x: &[f64]) -> f64 {
    -0.5 * norm_sq(x) - 0.5 * x.len() as f64 * (2.0 * PI).ln()
}

/// Euler-integrate `x0` to `t = 1` while accumulating
/// `log p = log N(x0; 0, I) - sum_i tr(dv/dx)(x_i, t_i) dt` (left endpoints).
pub fn trajectory_log_likelihood(
    f: &dyn VelocityField,
    x0: &[f64],
    n_steps: usize,
) -> Result<(Vec<f64>, f64)> {
    if n_steps == 0 {
        return Err(FlowError::config("trajectory needs at least one step"));
    }
    if x0.len() != f.dim() {
        return Err(FlowError::shape(format!("x0 has {} entries, field dimension {}", x0.len(), f.dim())));
    }
    let dt = 1.0 / n_steps as f64;
    let mut x = x0.to_vec();
    let mut logp = standard_normal_log_density(x0);
    for i in 0..n_steps {
        let t = i as f64 * dt;
        logp -= f.exact_trace(&x, t) * dt;
        let v = f.eval(&x, t);
        x.iter_mut().zip(&v).for_each(|(a, b)| *a += b * dt);
        if !all_finite(&x) || !logp.is_finite() {
            return Err(FlowError::DivergedTrajectory { step: i });
        }
    }
    Ok((x, logp))
}

/// Score from a velocity value already evaluated at `(x, t)`:
/// `(1/beta^2) [ (v - (dlog beta/dt) x) / (dlog(alpha/beta)/dt) - x ]`.
pub fn score_from_value(
    v: &[f64],
    x: &[f64],
    t: f64,
    s: InterpolationSchedule,
    clamp: &TimeClamp,
) -> Result<Vec<f64>> {
    let k = snr_terms(s, t, clamp)?;
    Ok(x.iter()
        .zip(v)
        .map(|(xi, vi)| ((vi - k.log_beta_rate * xi) / k.log_snr_rate - xi) / k.beta_sq)
        .collect())
}

pub fn score_from_velocity(
    f: &dyn VelocityField,
    s: InterpolationSchedule,
    x: &[f64],
    t: f64,
    clamp: &TimeClamp,
) -> Result<Vec<f64>> {
    clamp.check(t)?;
    score_from_value(&f.eval(x, t), x, t, s, clamp)
}

/// OT shortcut `(t v - x) / (1 - t)`.
pub fn ot_score(v: &[f64], x: &[f64], t: f64) -> Vec<f64> {
    x.iter().zip(v).map(|(xi, vi)| (t * vi - xi) / (1.0 - t)).collect()
}

/// Interpolation between the corrupted noise `A x0` and the measurement `y`.
#[derive(Debug, Clone)]
pub struct AuxiliaryPath {
    pub y: Vec<f64>,
    pub ax0: Vec<f64>,
    pub schedule: InterpolationSchedule,
}

impl AuxiliaryPath {
    pub fn new(y: Vec<f64>, ax0: Vec<f64>, schedule: InterpolationSchedule) -> Result<Self> {
        if y.len() != ax0.len() {
            return Err(FlowError::shape(format!(
                "measurement has {} entries, A x0 has {}",
                y.len(),
                ax0.len()
            )));
        }
        Ok(AuxiliaryPath { y, ax0, schedule })
    }

    pub fn at(&self, s: f64) -> Vec<f64> {
        if s == 1.0 {
            return self.y.clone();
        }
        if s == 0.0 {
            return self.ax0.clone();
        }
        let (a, b) = (self.schedule.alpha(s), self.schedule.beta(s));
        self.y.iter().zip(&self.ax0).map(|(p, q)| a * p + b * q).collect()
    }
}

/// `log N(y_t; A x_t, alpha_t^2 sigma_y^2 I)`.
pub fn local_data_loglik(
    path: &AuxiliaryPath,
    a: &dyn LinearOperator,
    x_t: &[f64],
    t: f64,
    sigma_y: f64,
) -> Result<f64> {
    let alpha = path.schedule.alpha(t);
    if !(t > 0.0) || !(alpha > 0.0) || t > 1.0 {
        return Err(FlowError::Domain { t, lo: 0.0, hi: 1.0 });
    }
    if !(sigma_y > 0.0) {
        return Err(FlowError::config(format!("sigma_y must be positive, got {sigma_y}")));
    }
    if x_t.len() != a.in_len() {
        return Err(FlowError::shape(format!("x_t has {} entries, operator expects {}", x_t.len(), a.in_len())));
    }
    let ax = a.forward(x_t);
    let yt = path.at(t);
    let var = alpha * alpha * sigma_y * sigma_y;
    let r2: f64 = yt.iter().zip(&ax).map(|(p, q)| (p - q) * (p - q)).sum();
    let m = yt.len() as f64;
    Ok(-r2 / (2.0 * var) - 0.5 * m * (2.0 * PI * var).ln())
}

/// Law of `x_t = alpha_t x_1 + beta_t x_0` for Gaussian data.
#[derive(Debug, Clone)]
pub struct GaussianMarginal {
    pub prior: GaussianDataPrior,
    pub schedule: InterpolationSchedule,
}

impl GaussianMarginal {
    pub fn new(prior: GaussianDataPrior, schedule: InterpolationSchedule) -> Self {
        GaussianMarginal { prior, schedule }
    }

    pub fn mean(&self, t: f64) -> Vec<f64> {
        self.prior.marginal_mean(self.schedule, t)
    }

    pub fn cov(&self, t: f64) -> SpdMatrix {
        self.prior.marginal_cov(self.schedule, t)
    }

    pub fn log_density(&self, x: &[f64], t: f64) -> f64 {
        self.cov(t).gaussian_log_density(x, &self.mean(t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{make_operator, OperatorSpec};
    use crate::tensor::Matrix;
    use crate::velocity::{analytic_gaussian_velocity, ConstantField, GaussianVelocity, LinearField};

    const OT: InterpolationSchedule = InterpolationSchedule::Ot;

    fn gaussian_field(d: usize, seed: u64) -> GaussianVelocity {
        let mut rng = Rng::new(seed);
        let prior = GaussianDataPrior::random_wishart(d, 0.3, (-1.0, 1.0), &mut rng).unwrap();
        analytic_gaussian_velocity(prior, OT)
    }

    fn random_linear(d: usize, rng: &mut Rng) -> LinearField {
        let m = Matrix::from_fn(d, d, |_, _| rng.normal());
        LinearField::new(m)
    }

    #[test]
    fn diagonal_trace() {
        let f = LinearField::new(Matrix::from_diag(&[2.0, 3.0]));
        let x = [0.4, -0.2];
        let mut rng = Rng::new(2);
        assert_eq!(trace_jacobian(&f, &x, 0.3, TraceEstimator::Exact, &mut rng), 5.0);
        let est = trace_jacobian(&f, &x, 0.3, TraceEstimator::Hutchinson { probes: 10_000 }, &mut rng);
        assert!((est - 5.0).abs() <= 0.05);
    }

    #[test]
    fn auto_estimator_switches_at_threshold() {
        let est = TraceEstimator::default();
        assert_eq!(est.probes_for(64), None);
        assert_eq!(est.probes_for(65), Some(16));
    }

    #[test]
    fn midpoint_jacobian_vanishes_for_standard_prior() {
        let prior = GaussianDataPrior::new(vec![0.0; 6], SpdMatrix::identity(6)).unwrap();
        let f = analytic_gaussian_velocity(prior, OT);
        let tr = trace_jacobian(&f, &[0.1; 6], 0.5, TraceEstimator::Exact, &mut Rng::new(0));
        assert_eq!(tr, 0.0);
    }

    #[test]
    fn closed_form_trace_matches_jvp_accumulation() {
        let f = gaussian_field(8, 4);
        for &t in &[0.0, 0.2, 0.5, 0.9] {
            let direct = f.exact_trace(&[0.0; 8], t);
            let probed = crate::velocity::trace_by_jvp(&f, &[0.0; 8], t);
            assert!((direct - probed).abs() <= 1e-12 * direct.abs().max(1.0));
        }
    }

    #[test]
    fn hutchinson_is_unbiased() {
        let mut rng = Rng::new(17);
        for &d in &[4usize, 16, 64] {
            let f = random_linear(d, &mut rng);
            let exact = f.exact_trace(&vec![0.0; d], 0.0);
            let samples: Vec<f64> = (0..10_000)
                .map(|_| {
                    let e = rng.rademacher_vec(d);
                    dot(&e, &f.jvp(&vec![0.0; d], 0.0, &e))
                })
                .collect();
            let n = samples.len() as f64;
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            assert!((mean - exact).abs() <= 3.0 * (var / n).sqrt(), "d = {d}");
        }
    }

    #[test]
    fn constant_field_keeps_base_density() {
        let f = ConstantField { c: vec![0.5, -1.0, 2.0] };
        let x0 = [0.1, 0.2, -0.3];
        let (x1, logp) = trajectory_log_likelihood(&f, &x0, 7).unwrap();
        assert_eq!(logp, standard_normal_log_density(&x0));
        for i in 0..3 {
            assert!((x1[i] - (x0[i] + f.c[i])).abs() < 1e-14);
        }
    }

    #[test]
    fn scalar_linear_field_loses_a_times_d() {
        let (a, d) = (0.7, 5);
        let f = LinearField::scalar(a, d);
        let x0 = [0.3, -0.1, 0.2, 0.9, -1.2];
        let (x1, logp) = trajectory_log_likelihood(&f, &x0, 1000).unwrap();
        let expected = standard_normal_log_density(&x0) - a * d as f64;
        assert!((logp - expected).abs() < 1e-10);
        for i in 0..d {
            assert!((x1[i] - x0[i] * a.exp()).abs() <= 1e-3 * x0[i].abs().max(1.0));
        }
    }

    #[test]
    fn gaussian_log_likelihood_converges_at_first_order() {
        let f = gaussian_field(8, 3);
        let x0 = Rng::new(8).normal_vec(8);
        let truth = f.prior.sigma.gaussian_log_density(&f.prior.ot_flow_map(&x0), &f.prior.mu);
        let errs: Vec<f64> = [50, 100, 200, 400]
            .iter()
            .map(|&n| (trajectory_log_likelihood(&f, &x0, n).unwrap().1 - truth).abs())
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((1.6..=2.4).contains(&ratio), "{errs:?}");
        }
    }

    #[test]
    fn diverging_trajectory_is_reported() {
        let f = LinearField::scalar(1e10, 2);
        let err = trajectory_log_likelihood(&f, &[1e300, 1.0], 2).unwrap_err();
        assert!(matches!(err, FlowError::DivergedTrajectory { step: 0 }), "{err}");
    }

    #[test]
    fn ot_score_of_zero_velocity() {
        let clamp = TimeClamp::default();
        let s = score_from_value(&[0.0], &[1.0], 0.5, OT, &clamp).unwrap();
        assert!((s[0] + 2.0).abs() < 1e-15);
        assert_eq!(ot_score(&[0.0], &[1.0], 0.5), vec![-2.0]);
    }

    #[test]
    fn general_formula_matches_ot_shortcut() {
        let mut rng = Rng::new(6);
        let clamp = TimeClamp::default();
        for _ in 0..100 {
            let x = rng.normal_vec(5);
            let v = rng.normal_vec(5);
            let t = rng.uniform_range(0.01, 0.99);
            let a = score_from_value(&v, &x, t, OT, &clamp).unwrap();
            let b = ot_score(&v, &x, t);
            for i in 0..5 {
                assert!((a[i] - b[i]).abs() <= 1e-12 * b[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn velocity_score_round_trip() {
        let f = gaussian_field(8, 9);
        let mut rng = Rng::new(10);
        let clamp = TimeClamp::default();
        for s in [OT, InterpolationSchedule::Trigonometric] {
            let f = analytic_gaussian_velocity(f.prior.clone(), s);
            for _ in 0..100 {
                let x = rng.normal_vec(8);
                let t = rng.uniform_range(0.05, 0.95);
                let got = score_from_velocity(&f, s, &x, t, &clamp).unwrap();
                let want = f.analytic_score(&x, t);
                let scale = want.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                for i in 0..8 {
                    assert!((got[i] - want[i]).abs() <= 1e-8 * scale);
                }
            }
        }
    }

    #[test]
    fn score_outside_clamp_is_domain_error() {
        let f = gaussian_field(2, 1);
        let clamp = TimeClamp::for_steps(1e-3, 10);
        assert!(matches!(
            score_from_velocity(&f, OT, &[0.0, 0.0], 0.95, &clamp),
            Err(FlowError::Domain { .. })
        ));
        assert!(score_from_velocity(&f, OT, &[0.0, 0.0], 0.0, &clamp).is_err());
    }

    #[test]
    fn auxiliary_path_endpoints_are_exact() {
        let mut rng = Rng::new(3);
        let y = rng.normal_vec(6);
        let ax0 = rng.normal_vec(6);
        let p = AuxiliaryPath::new(y.clone(), ax0.clone(), OT).unwrap();
        assert_eq!(p.at(1.0), y);
        assert_eq!(p.at(0.0), ax0);
    }

    #[test]
    fn zero_residual_likelihood() {
        let op = make_operator(&OperatorSpec::Identity, &[3]).unwrap();
        let x = [0.2, 0.4, -0.1];
        let path = AuxiliaryPath::new(x.to_vec(), x.to_vec(), OT).unwrap();
        let ll = local_data_loglik(&path, op.as_ref(), &x, 0.5, 0.1).unwrap();
        let var: f64 = 0.25 * 0.01;
        assert!((var - 0.0025).abs() < 1e-15);
        assert!((ll + 1.5 * (2.0 * PI * var).ln()).abs() < 1e-12);
        assert!(matches!(
            local_data_loglik(&path, op.as_ref(), &x, 0.0, 0.1),
            Err(FlowError::Domain { .. })
        ));
    }

    #[test]
    fn auxiliary_residual_std_scales_with_alpha() {
        let d = 12;
        let sigma_y = 0.1;
        let mut rng = Rng::new(44);
        let prior = GaussianDataPrior::random_wishart(d, 0.3, (0.0, 1.0), &mut rng).unwrap();
        let op = make_operator(&OperatorSpec::MaskRandom { fraction: 0.5, seed: 2 }, &[d]).unwrap();
        for &t in &[0.25, 0.5, 0.75] {
            let mut resid = Vec::new();
            for _ in 0..10_000 {
                let x1 = prior.sample(&mut rng);
                let x0 = rng.normal_vec(d);
                let mut y = op.forward(&x1);
                y.iter_mut().for_each(|v| *v += sigma_y * rng.normal());
                let path = AuxiliaryPath::new(y, op.forward(&x0), OT).unwrap();
                let xt: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| t * a + (1.0 - t) * b).collect();
                let ax = op.forward(&xt);
                resid.extend(path.at(t).iter().zip(&ax).map(|(p, q)| p - q));
            }
            let n = resid.len() as f64;
            let mean = resid.iter().sum::<f64>() / n;
            let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            assert!((std / (t * sigma_y) - 1.0).abs() <= 0.05, "t = {t}: {std}");
        }
    }

    #[test]
    fn marginal_matches_field_density() {
        let f = gaussian_field(4, 12);
        let m = GaussianMarginal::new(f.prior.clone(), OT);
        let x = [0.1, 0.5, -0.3, 0.0];
        assert_eq!(m.log_density(&x, 0.4), f.log_density(&x, 0.4).unwrap());
        assert!(m.cov(0.0).matrix().data().iter().zip(SpdMatrix::identity(4).matrix().data()).all(|(a, b)| a == b));
    }
}
