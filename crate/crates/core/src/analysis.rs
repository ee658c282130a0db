//! Executable checks of the theory behind trajectory matching: the weighted
//! local-objective decomposition and its convergence gap, trajectory
//! compliance, and closed-form Gaussian MAP / evidence oracles.

use crate::error::{FlowError, Result};
use crate::likelihood::{AuxiliaryPath, GaussianMarginal};
use crate::operators::LinearOperator;
use crate::par;
use crate::schedule::InterpolationSchedule;
use crate::tensor::{Matrix, Rng, SpdMatrix};
use crate::velocity::{GaussianDataPrior, VelocityField};

/// Beyond this many steps the smallest weights `2^-N` lose precision relative to 1.
pub const GAMMA_PRECISION_LIMIT: usize = 60;

#[derive(Debug, Clone, PartialEq)]
pub struct LocalObjectiveWeights {
    /// `gamma_i = 2^-(N - i + 1)`, `i = 1..N`.
    pub gamma: Vec<f64>,
    /// `c_i = (m/2) log(alpha_{i dt}^2)`.
    pub c_terms: Vec<f64>,
    /// `sum_i gamma_i c_i - log p(y)`.
    pub c_of_n: f64,
    pub precision_warning: bool,
}

impl LocalObjectiveWeights {
    pub fn new(n: usize, m: usize, s: InterpolationSchedule, log_py: f64) -> Self {
        let dt = 1.0 / n as f64;
        let gamma: Vec<f64> = (1..=n).map(|i| 0.5f64.powi((n - i + 1) as i32)).collect();
        let c_terms: Vec<f64> = (1..=n)
            .map(|i| {
                let a = s.alpha(i as f64 * dt);
                0.5 * m as f64 * (a * a).ln()
            })
            .collect();
        let c_of_n = gamma.iter().zip(&c_terms).map(|(g, c)| g * c).sum::<f64>() - log_py;
        LocalObjectiveWeights {
            gamma,
            c_terms,
            c_of_n,
            precision_warning: n > GAMMA_PRECISION_LIMIT,
        }
    }

    pub fn gamma_sum(&self) -> f64 {
        self.gamma.iter().sum()
    }
}

/// `log N(y; A mu, A Sigma A^T + sigma_y^2 I)`.
pub fn gaussian_log_evidence(
    prior: &GaussianDataPrior,
    a: &dyn LinearOperator,
    y: &[f64],
    sigma_y: f64,
) -> Result<f64> {
    let am = a.to_matrix();
    let cov = am.matmul(prior.sigma.matrix()).matmul(&am.transpose()).add_identity(sigma_y * sigma_y);
    let cov = SpdMatrix::new(symmetrize(&cov))?;
    Ok(cov.gaussian_log_density(y, &am.matvec(&prior.mu)))
}

#[derive(Debug, Clone)]
pub struct Theorem1Gap {
    pub gap: f64,
    /// `log p(x1 | y)`.
    pub log_posterior: f64,
    /// `sum_i gamma_i J_i`.
    pub weighted_sum: f64,
    /// Local objectives `J_i`, `i = 1..N`.
    pub local_objectives: Vec<f64>,
    pub weights: LocalObjectiveWeights,
    pub x1: Vec<f64>,
}

/// `|log p(x1 | y) - sum_i gamma_i J_i - c(N)|` on the exact straight path from
/// `x0` to its OT flow-map image `x1`, with
/// `J_i = log p(x_{(i-1)dt}) - tr(dv/dx)(x_{(i-1)dt}) dt + log N(y_{i dt}; A x_{i dt}, alpha^2 sigma_y^2 I)`.
pub fn theorem1_gap(
    prior: &GaussianDataPrior,
    s: InterpolationSchedule,
    a: &dyn LinearOperator,
    y: &[f64],
    x0: &[f64],
    n: usize,
    sigma_y: f64,
) -> Result<Theorem1Gap> {
    if !s.is_straight() {
        return Err(FlowError::config("the decomposition gap is only defined for the OT schedule"));
    }
    if n == 0 || !(sigma_y > 0.0) {
        return Err(FlowError::config("need N >= 1 and sigma_y > 0"));
    }
    if x0.len() != prior.dim() || a.in_len() != prior.dim() || y.len() != a.out_len() {
        return Err(FlowError::shape("prior, operator and measurement dimensions disagree"));
    }
    let field = crate::velocity::analytic_gaussian_velocity(prior.clone(), s);
    let marginal = GaussianMarginal::new(prior.clone(), s);
    let x1 = prior.ot_flow_map(x0);
    let path = AuxiliaryPath::new(y.to_vec(), a.forward(x0), s)?;
    let m = y.len();
    let log_py = gaussian_log_evidence(prior, a, y, sigma_y)?;
    let weights = LocalObjectiveWeights::new(n, m, s, log_py);

    let x_at = |t: f64| -> Vec<f64> {
        let (al, be) = (s.alpha(t), s.beta(t));
        x1.iter().zip(x0).map(|(p, q)| al * p + be * q).collect()
    };
    let dt = 1.0 / n as f64;
    let local_objectives: Vec<f64> = (1..=n)
        .map(|i| {
            let tp = (i - 1) as f64 * dt;
            let ti = i as f64 * dt;
            let xp = x_at(tp);
            let prior_term = marginal.log_density(&xp, tp) - field.exact_trace(&xp, tp) * dt;
            Ok(prior_term + crate::likelihood::local_data_loglik(&path, a, &x_at(ti), ti, sigma_y)?)
        })
        .collect::<Result<_>>()?;
    let weighted_sum: f64 = weights.gamma.iter().zip(&local_objectives).map(|(g, j)| g * j).sum();

    let noise = SpdMatrix::new(Matrix::identity(m).add_identity(sigma_y * sigma_y - 1.0))?;
    let log_posterior =
        marginal.log_density(&x1, 1.0) + noise.gaussian_log_density(y, &a.forward(&x1)) - log_py;
    Ok(Theorem1Gap {
        gap: (log_posterior - weighted_sum - weights.c_of_n).abs(),
        log_posterior,
        weighted_sum,
        local_objectives,
        weights,
        x1,
    })
}

#[derive(Debug, Clone)]
pub struct ComplianceReport {
    /// Monte-Carlo estimate of the compliance integral.
    pub s_value: f64,
    pub s_std_error: f64,
    pub times: Vec<f64>,
    /// `E |z_hat_t - z_t|^2` per grid time.
    pub per_t_deviation: Vec<f64>,
    /// Standard error of `S - |z_hat_t - z_t|^2` per grid time.
    pub per_t_std_error: Vec<f64>,
    pub bound_satisfied: bool,
}

/// Estimate `S = int_0^1 E |v(z_t, t) - (alpha' z1 + beta' z0)|^2 dt` with a
/// `grid`-point midpoint rule and compare it to the deviation of the Euler
/// trajectory `z_t` from the interpolation `alpha_t z1 + beta_t z0`.
///
/// The rollout uses step `1 / (2 grid)` so every midpoint is a state.
pub fn compliance_measure<F>(
    field: &dyn VelocityField,
    s: InterpolationSchedule,
    sample_pair: F,
    mc_samples: usize,
    grid: usize,
    rng: &Rng,
) -> Result<ComplianceReport>
where
    F: Fn(&mut Rng) -> (Vec<f64>, Vec<f64>) + Sync + Send,
{
    if mc_samples < 2 || grid == 0 {
        return Err(FlowError::config("compliance needs at least 2 samples and 1 grid point"));
    }
    let steps = 2 * grid;
    let h = 1.0 / steps as f64;
    let times: Vec<f64> = (0..grid).map(|j| (2 * j + 1) as f64 * h).collect();
    let d = field.dim();

    // (S_i, D_i(t_j) for each j)
    let per_sample: Vec<(f64, Vec<f64>)> = par::map_range(mc_samples, |i| {
        let mut r = rng.substream(i as u64);
        let (z0, z1) = sample_pair(&mut r);
        let mut z = z0.clone();
        let mut s_acc = 0.0;
        let mut dev = Vec::with_capacity(grid);
        for k in 0..steps {
            let t = k as f64 * h;
            if k % 2 == 1 {
                let v = field.eval(&z, t);
                let (ad, bd) = (s.alpha_dot(t), s.beta_dot(t));
                let (al, be) = (s.alpha(t), s.beta(t));
                let mut sq = 0.0;
                let mut dq = 0.0;
                for c in 0..d {
                    let w = v[c] - (ad * z1[c] + bd * z0[c]);
                    sq += w * w;
                    let e = al * z1[c] + be * z0[c] - z[c];
                    dq += e * e;
                }
                s_acc += sq;
                dev.push(dq);
                z.iter_mut().zip(&v).for_each(|(a, b)| *a += b * h);
            } else {
                let v = field.eval(&z, t);
                z.iter_mut().zip(&v).for_each(|(a, b)| *a += b * h);
            }
        }
        (s_acc / grid as f64, dev)
    });

    let n = mc_samples as f64;
    let s_vals: Vec<f64> = per_sample.iter().map(|p| p.0).collect();
    let (s_value, s_std_error) = mean_and_se(&s_vals);
    if !s_value.is_finite() {
        return Err(FlowError::DivergedTrajectory { step: 0 });
    }
    let mut per_t_deviation = Vec::with_capacity(grid);
    let mut per_t_std_error = Vec::with_capacity(grid);
    let mut bound_satisfied = true;
    for j in 0..grid {
        let dev: Vec<f64> = per_sample.iter().map(|p| p.1[j]).collect();
        let margin: Vec<f64> = per_sample.iter().map(|p| p.0 - p.1[j]).collect();
        let dev_mean = dev.iter().sum::<f64>() / n;
        per_t_deviation.push(dev_mean);
        let (m_mean, m_se) = mean_and_se(&margin);
        per_t_std_error.push(m_se);
        let roundoff = 64.0 * f64::EPSILON * s_value.max(dev_mean).max(1.0);
        if m_mean < -3.0 * m_se - roundoff {
            bound_satisfied = false;
        }
    }
    Ok(ComplianceReport {
        s_value,
        s_std_error,
        times,
        per_t_deviation,
        per_t_std_error,
        bound_satisfied,
    })
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Denoising MAP `(Sigma + sigma^2 I)^{-1} (sigma^2 mu + Sigma y)`, equal to
/// `(Sigma^{-1} + sigma^{-2} I)^{-1} (Sigma^{-1} mu + sigma^{-2} y)`.
pub fn gaussian_map_oracle(prior: &GaussianDataPrior, y: &[f64], sigma_y: f64) -> Result<Vec<f64>> {
    if y.len() != prior.dim() {
        return Err(FlowError::shape(format!("y has {} entries, prior dimension {}", y.len(), prior.dim())));
    }
    let s2 = sigma_y * sigma_y;
    let k = SpdMatrix::new(prior.sigma.matrix().add_identity(s2))?;
    let sy = prior.sigma.matvec(y);
    let rhs: Vec<f64> = prior.mu.iter().zip(&sy).map(|(m, v)| s2 * m + v).collect();
    Ok(k.solve(&rhs))
}

/// MAP for a general linear operator: `mu + Sigma A^T (A Sigma A^T + sigma^2 I)^{-1} (y - A mu)`.
pub fn gaussian_map_oracle_linear(
    prior: &GaussianDataPrior,
    a: &dyn LinearOperator,
    y: &[f64],
    sigma_y: f64,
) -> Result<Vec<f64>> {
    let am = a.to_matrix();
    let sat = prior.sigma.matrix().matmul(&am.transpose());
    let k = am.matmul(&sat).add_identity(sigma_y * sigma_y);
    let k = SpdMatrix::new(symmetrize(&k))?;
    let r: Vec<f64> = y.iter().zip(am.matvec(&prior.mu)).map(|(p, q)| p - q).collect();
    let corr = sat.matvec(&k.solve(&r));
    Ok(prior.mu.iter().zip(corr).map(|(m, c)| m + c).collect())
}

/// Largest `|tr(dv/dx)|` along the Euler trajectories from the given starts.
pub fn empirical_c1(field: &dyn VelocityField, starts: &[Vec<f64>], n_steps: usize) -> f64 {
    let dt = 1.0 / n_steps as f64;
    let per = par::map_slice(starts, |x0| {
        let mut x = x0.clone();
        let mut worst = 0.0f64;
        for i in 0..n_steps {
            let t = i as f64 * dt;
            worst = worst.max(field.exact_trace(&x, t).abs());
            let v = field.eval(&x, t);
            x.iter_mut().zip(&v).for_each(|(a, b)| *a += b * dt);
        }
        worst
    });
    per.into_iter().fold(0.0, f64::max)
}

fn symmetrize(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| 0.5 * (m.get(i, j) + m.get(j, i)))
}
