//! Conditional flow-matching regression of an [`MlpVelocity`].

use super::mlp::MlpVelocity;
use crate::error::{FlowError, Result};
use crate::optim::Adam;
use crate::par;
use crate::schedule::InterpolationSchedule;
use crate::tensor::Rng;

const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate reached at the last step by cosine decay; equal to `lr`
    /// for a constant rate.
    pub lr_final: f64,
    pub hidden: Vec<usize>,
    pub schedule: InterpolationSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 128,
            lr: 1e-3,
            lr_final: 1e-3,
            hidden: vec![128, 128],
            schedule: InterpolationSchedule::Ot,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub field: MlpVelocity,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

struct Sample {
    xt: Vec<f64>,
    t: f64,
    target: Vec<f64>,
}

/// Fit `v_theta` by minimising `E |v(x_t, t) - (alpha' x1 + beta' x0)|^2` with
/// `x0 ~ N(0, I)`, `t ~ U(0, 1)` and `x1` drawn from `sample_data`.
pub fn train_flow_matching(
    dim: usize,
    config: &TrainConfig,
    rng: &mut Rng,
    mut sample_data: impl FnMut(&mut Rng) -> Vec<f64>,
) -> Result<TrainOutcome> {
    if config.steps == 0 || config.batch == 0 || !(config.lr > 0.0) {
        return Err(FlowError::config("training needs steps, batch and lr > 0"));
    }
    let mut init_rng = rng.fork("init");
    let mut data_rng = rng.fork("data");
    let mut noise_rng = rng.fork("noise");
    let mut field = MlpVelocity::new(dim, &config.hidden, &mut init_rng);
    let n_params = field.params().len();
    let mut opt = Adam::new(n_params, config.lr);
    let mut losses = Vec::with_capacity(config.steps);
    let sched = config.schedule;

    for step in 0..config.steps {
        let batch: Vec<Sample> = (0..config.batch)
            .map(|_| {
                let x1 = sample_data(&mut data_rng);
                let x0 = noise_rng.normal_vec(dim);
                let t = noise_rng.uniform();
                let (a, b, ad, bd) = (sched.alpha(t), sched.beta(t), sched.alpha_dot(t), sched.beta_dot(t));
                let xt = x1.iter().zip(&x0).map(|(p, q)| a * p + b * q).collect();
                let target = x1.iter().zip(&x0).map(|(p, q)| ad * p + bd * q).collect();
                Sample { xt, t, target }
            })
            .collect();

        let scale = 1.0 / config.batch as f64;
        let n_chunks = batch.len().div_ceil(CHUNK);
        let net = &field;
        let parts = par::map_range(n_chunks, |c| {
            let mut grad = vec![0.0; n_params];
            let mut loss = 0.0;
            for s in &batch[c * CHUNK..((c + 1) * CHUNK).min(batch.len())] {
                let tape = net.forward(&s.xt, s.t);
                let resid: Vec<f64> = tape.output().iter().zip(&s.target).map(|(v, y)| v - y).collect();
                loss += resid.iter().map(|r| r * r).sum::<f64>();
                let w: Vec<f64> = resid.iter().map(|r| 2.0 * scale * r).collect();
                net.backward(&tape, &w, Some(&mut grad));
            }
            (loss, grad)
        });
        let loss = parts.iter().map(|p| p.0).sum::<f64>() * scale;
        if !loss.is_finite() {
            return Err(FlowError::TrainingDiverged { step, loss });
        }
        let grads: Vec<Vec<f64>> = parts.into_iter().map(|p| p.1).collect();
        let grad = par::sum_vectors(&grads, n_params);

        let progress = step as f64 / (config.steps.max(2) - 1) as f64;
        opt.lr = config.lr_final
            + 0.5 * (config.lr - config.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos());
        opt.step(field.params_mut(), &grad);
        losses.push(loss);
    }
    Ok(TrainOutcome { field, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::velocity::VelocityField;

    #[test]
    fn loss_decreases_on_a_point_mass() {
        let cfg = TrainConfig {
            steps: 300,
            batch: 32,
            lr: 3e-3,
            lr_final: 3e-3,
            hidden: vec![32, 32],
            schedule: InterpolationSchedule::Ot,
        };
        let out = train_flow_matching(2, &cfg, &mut Rng::new(3), |_| vec![1.0, -1.0]).unwrap();
        let head: f64 = out.losses[..20].iter().sum::<f64>() / 20.0;
        let tail: f64 = out.losses[280..].iter().sum::<f64>() / 20.0;
        assert!(tail < 0.5 * head, "{head} -> {tail}");
        // toward the atom at t close to 1
        let v = out.field.eval(&[1.0, -1.0], 0.95);
        assert!(v.iter().all(|c| c.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = TrainConfig { steps: 20, batch: 40, hidden: vec![8], ..TrainConfig::default() };
        let run = || {
            train_flow_matching(3, &cfg, &mut Rng::new(11), |r| r.normal_vec(3))
                .unwrap()
                .field
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn nan_data_reports_divergence() {
        let cfg = TrainConfig { steps: 5, batch: 4, hidden: vec![4], ..TrainConfig::default() };
        let err = train_flow_matching(1, &cfg, &mut Rng::new(0), |_| vec![f64::NAN]).unwrap_err();
        assert!(matches!(err, FlowError::TrainingDiverged { step: 0, .. }));
    }

    #[test]
    fn rejects_empty_config() {
        let cfg = TrainConfig { steps: 0, ..TrainConfig::default() };
        assert!(train_flow_matching(1, &cfg, &mut Rng::new(0), |_| vec![0.0]).is_err());
    }
}
