//! Closed-form optimal velocity for Gaussian data `N(mu, Sigma)` and
//! standard-normal noise.
//!
//! With `C_t = alpha^2 Sigma + beta^2 I`:
//!
//! ```text
//! v(x, t)  = alpha' (mu + alpha Sigma C_t^{-1} (x - alpha mu)) + beta' beta C_t^{-1} (x - alpha mu)
//! dv/dx    = (alpha' alpha Sigma + beta' beta I) C_t^{-1}
//! score    = -C_t^{-1} (x - alpha mu)
//! ```

use super::VelocityField;
use crate::error::{FlowError, Result};
use crate::schedule::InterpolationSchedule;
use crate::tensor::{dot, symmetric_eigen, Matrix, Rng, SpdMatrix, Tensor};

#[derive(Debug, Clone)]
pub struct GaussianDataPrior {
    pub mu: Vec<f64>,
    pub sigma: SpdMatrix,
}

impl GaussianDataPrior {
    pub fn new(mu: Vec<f64>, sigma: SpdMatrix) -> Result<Self> {
        if mu.len() != sigma.dim() {
            return Err(FlowError::shape(format!(
                "mean has {} entries, covariance is {}x{}",
                mu.len(),
                sigma.dim(),
                sigma.dim()
            )));
        }
        Ok(GaussianDataPrior { mu, sigma })
    }

    /// Random prior with covariance `Q diag(spectrum) Q^T` (`Q` a random
    /// rotation) and mean uniform in `mean_range`.
    pub fn with_spectrum(spectrum: &[f64], mean_range: (f64, f64), rng: &mut Rng) -> Result<Self> {
        let d = spectrum.len();
        let q = random_orthogonal(d, rng);
        let cov = Matrix::from_fn(d, d, |i, j| {
            (0..d).map(|k| q.get(i, k) * spectrum[k] * q.get(j, k)).sum()
        });
        let cov = symmetrize(&cov);
        let mu = (0..d).map(|_| rng.uniform_range(mean_range.0, mean_range.1)).collect();
        Self::new(mu, SpdMatrix::new(cov)?)
    }

    /// Random prior with covariance `B B^T / d + shift I`, `B` standard normal.
    pub fn random_wishart(d: usize, shift: f64, mean_range: (f64, f64), rng: &mut Rng) -> Result<Self> {
        let b = Matrix::from_fn(d, d, |_, _| rng.normal());
        let cov = symmetrize(&b.matmul(&b.transpose()).lin_comb(1.0 / d as f64, &Matrix::identity(d), shift));
        let mu = (0..d).map(|_| rng.uniform_range(mean_range.0, mean_range.1)).collect();
        Self::new(mu, SpdMatrix::new(cov)?)
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn sample(&self, rng: &mut Rng) -> Vec<f64> {
        let z = rng.normal_vec(self.dim());
        let lz = self.sigma.cholesky().mul_lower(&z);
        self.mu.iter().zip(lz).map(|(m, v)| m + v).collect()
    }

    pub fn sample_tensor(&self, rng: &mut Rng) -> Tensor {
        Tensor::vector(self.sample(rng))
    }

    /// Covariance of `x_t = alpha x_1 + beta x_0`.
    pub fn marginal_cov(&self, s: InterpolationSchedule, t: f64) -> SpdMatrix {
        let (a, b) = (s.alpha(t), s.beta(t));
        let c = self.sigma.matrix().lin_comb(a * a, &Matrix::identity(self.dim()), b * b);
        SpdMatrix::new(symmetrize(&c)).expect("alpha^2 Sigma + beta^2 I is SPD on [0, 1]")
    }

    pub fn marginal_mean(&self, s: InterpolationSchedule, t: f64) -> Vec<f64> {
        let a = s.alpha(t);
        self.mu.iter().map(|m| a * m).collect()
    }

    /// Exact flow map of the OT field: `Sigma^{1/2} x0 + mu`.
    pub fn ot_flow_map(&self, x0: &[f64]) -> Vec<f64> {
        let eig = symmetric_eigen(self.sigma.matrix()).expect("covariance is symmetric");
        let root = eig.map_spectrum(f64::sqrt);
        let mut x1 = root.matvec(x0);
        x1.iter_mut().zip(&self.mu).for_each(|(a, m)| *a += m);
        x1
    }
}

fn symmetrize(m: &Matrix) -> Matrix {
    Matrix::from_fn(m.rows(), m.cols(), |i, j| 0.5 * (m.get(i, j) + m.get(j, i)))
}

/// Haar-ish random rotation by Gram–Schmidt on a Gaussian matrix.
fn random_orthogonal(d: usize, rng: &mut Rng) -> Matrix {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(d);
    while cols.len() < d {
        let mut v = rng.normal_vec(d);
        for _ in 0..2 {
            for c in &cols {
                let p = dot(&v, c);
                v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|a| *a /= n);
            cols.push(v);
        }
    }
    Matrix::from_fn(d, d, |i, k| cols[k][i])
}

/// Optimal flow-matching velocity for a Gaussian data prior.
#[derive(Debug, Clone)]
pub struct GaussianVelocity {
    pub prior: GaussianDataPrior,
    pub schedule: InterpolationSchedule,
}

pub fn analytic_gaussian_velocity(
    prior: GaussianDataPrior,
    s: InterpolationSchedule,
) -> GaussianVelocity {
    GaussianVelocity { prior, schedule: s }
}

impl GaussianVelocity {
    fn coeffs(&self, t: f64) -> (f64, f64, f64, f64) {
        let s = self.schedule;
        (s.alpha(t), s.beta(t), s.alpha_dot(t), s.beta_dot(t))
    }

    /// `(alpha' alpha Sigma + beta' beta I) z`
    fn apply_m(&self, t: f64, z: &[f64]) -> Vec<f64> {
        let (a, b, ad, bd) = self.coeffs(t);
        let sz = self.prior.sigma.matvec(z);
        sz.iter().zip(z).map(|(p, q)| ad * a * p + bd * b * q).collect()
    }

    /// `grad_x log p_t(x) = -C_t^{-1} (x - alpha mu)`.
    pub fn analytic_score(&self, x: &[f64], t: f64) -> Vec<f64> {
        let c = self.prior.marginal_cov(self.schedule, t);
        let r: Vec<f64> = x
            .iter()
            .zip(self.prior.marginal_mean(self.schedule, t))
            .map(|(a, b)| a - b)
            .collect();
        c.solve(&r).into_iter().map(|v| -v).collect()
    }

    pub fn jacobian(&self, t: f64) -> Matrix {
        let (a, b, ad, bd) = self.coeffs(t);
        let c = self.prior.marginal_cov(self.schedule, t);
        let m = self.prior.sigma.matrix().lin_comb(ad * a, &Matrix::identity(self.prior.dim()), bd * b);
        // J = M C^{-1} = (C^{-1} M)^T since both are symmetric.
        c.cholesky().solve_matrix(&m).transpose()
    }
}

impl VelocityField for GaussianVelocity {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64> {
        let (a, _, ad, _) = self.coeffs(t);
        let c = self.prior.marginal_cov(self.schedule, t);
        let r: Vec<f64> = x.iter().zip(&self.prior.mu).map(|(xi, m)| xi - a * m).collect();
        let z = c.solve(&r);
        let mz = self.apply_m(t, &z);
        self.prior.mu.iter().zip(mz).map(|(m, v)| ad * m + v).collect()
    }

    fn jvp(&self, _x: &[f64], t: f64, u: &[f64]) -> Vec<f64> {
        let c = self.prior.marginal_cov(self.schedule, t);
        self.apply_m(t, &c.solve(u))
    }

    fn vjp(&self, _x: &[f64], t: f64, w: &[f64]) -> Vec<f64> {
        let c = self.prior.marginal_cov(self.schedule, t);
        c.solve(&self.apply_m(t, w))
    }

    fn grad_of_jvp_probe(&self, _x: &[f64], _t: f64, _eps: &[f64]) -> Vec<f64> {
        vec![0.0; self.dim()]
    }

    fn exact_trace(&self, _x: &[f64], t: f64) -> f64 {
        self.jacobian(t).trace()
    }

    fn jacobian_is_state_independent(&self) -> bool {
        true
    }

    fn log_density(&self, x: &[f64], t: f64) -> Option<f64> {
        let c = self.prior.marginal_cov(self.schedule, t);
        Some(c.gaussian_log_density(x, &self.prior.marginal_mean(self.schedule, t)))
    }
}
