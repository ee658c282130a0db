//! Velocity fields `v(x, t)` of the generative ODE `dx = v dt`, with the
//! differentiation hooks the solvers need.

mod gaussian;
mod mlp;
mod simple;
mod train;

pub use gaussian::{analytic_gaussian_velocity, GaussianDataPrior, GaussianVelocity};
pub use mlp::{MlpTape, MlpVelocity, FLWM_MAGIC, FLWM_VERSION, TIME_FEATURES};
pub use simple::{ConstantField, LinearField};
pub use train::{train_flow_matching, TrainConfig, TrainOutcome};

use crate::tensor::dot;

/// Differentiable velocity field on `R^dim x [0, 1]`.
///
/// All Jacobians are with respect to the state `x`.
pub trait VelocityField: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, x: &[f64], t: f64) -> Vec<f64>;

    /// `(dv/dx) u`
    fn jvp(&self, x: &[f64], t: f64, u: &[f64]) -> Vec<f64>;

    /// `(dv/dx)^T w`
    fn vjp(&self, x: &[f64], t: f64, w: &[f64]) -> Vec<f64>;

    /// Evaluate `v`, build a cotangent from it, and pull the cotangent back.
    /// Fields with a reverse-mode tape share the forward pass.
    fn eval_then_vjp(
        &self,
        x: &[f64],
        t: f64,
        cotangent: &mut dyn FnMut(&[f64]) -> Vec<f64>,
    ) -> (Vec<f64>, Vec<f64>) {
        let v = self.eval(x, t);
        let w = cotangent(&v);
        let g = self.vjp(x, t, &w);
        (v, g)
    }

    /// `grad_x (eps^T (dv/dx) eps)`.
    fn grad_of_jvp_probe(&self, x: &[f64], t: f64, eps: &[f64]) -> Vec<f64>;

    /// `tr(dv/dx)`; the default accumulates `dim` basis JVPs.
    fn exact_trace(&self, x: &[f64], t: f64) -> f64 {
        let d = self.dim();
        let mut e = vec![0.0; d];
        let mut tr = 0.0;
        for i in 0..d {
            e[i] = 1.0;
            tr += self.jvp(x, t, &e)[i];
            e[i] = 0.0;
        }
        tr
    }

    /// True when `dv/dx` does not depend on `x`, so trace gradients vanish.
    fn jacobian_is_state_independent(&self) -> bool {
        false
    }

    /// Exact `log p_t(x)` of the marginal this field transports, when known.
    fn log_density(&self, _x: &[f64], _t: f64) -> Option<f64> {
        None
    }
}

/// One Euler step `x + v(x, t) dt`.
pub fn euler_step(field: &dyn VelocityField, x: &[f64], t: f64, dt: f64) -> Vec<f64> {
    let v = field.eval(x, t);
    x.iter().zip(&v).map(|(a, b)| a + b * dt).collect()
}

/// Unconditional Euler rollout from `x0` over `n_steps` uniform steps.
pub fn euler_rollout(field: &dyn VelocityField, x0: &[f64], n_steps: usize) -> Vec<f64> {
    let dt = 1.0 / n_steps as f64;
    let mut x = x0.to_vec();
    for i in 0..n_steps {
        x = euler_step(field, &x, i as f64 * dt, dt);
    }
    x
}

/// Exact trace of `dv/dx` by probing, used by tests on fields with custom traces.
pub fn trace_by_jvp(field: &dyn VelocityField, x: &[f64], t: f64) -> f64 {
    let d = field.dim();
    let mut e = vec![0.0; d];
    (0..d)
        .map(|i| {
            e[i] = 1.0;
            let v = dot(&field.jvp(x, t, &e), &e);
            e[i] = 0.0;
            v
        })
        .sum()
}
