//! Interpolation schedules `x_t = alpha(t) x_1 + beta(t) x_0` and the
//! signal-to-noise rates used to convert velocities into scores.

use crate::error::{FlowError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterpolationSchedule {
    /// Straight path: `alpha = t`, `beta = 1 - t`.
    Ot,
    /// `alpha = sin(pi t / 2)`, `beta = cos(pi t / 2)`. Not selectable from
    /// configuration files; kept for exercising the general score formula.
    Trigonometric,
}

const HALF_PI: f64 = std::f64::consts::FRAC_PI_2;

impl InterpolationSchedule {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "ot" => Ok(InterpolationSchedule::Ot),
            other => Err(FlowError::config(format!(
                "unsupported schedule `{other}` (only `ot` is available)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InterpolationSchedule::Ot => "ot",
            InterpolationSchedule::Trigonometric => "trigonometric",
        }
    }

    pub fn is_straight(&self) -> bool {
        matches!(self, InterpolationSchedule::Ot)
    }

    #[inline]
    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            InterpolationSchedule::Ot => t,
            InterpolationSchedule::Trigonometric => {
                if t == 1.0 {
                    1.0
                } else {
                    (HALF_PI * t).sin()
                }
            }
        }
    }

    #[inline]
    pub fn beta(&self, t: f64) -> f64 {
        match self {
            InterpolationSchedule::Ot => 1.0 - t,
            InterpolationSchedule::Trigonometric => {
                if t == 1.0 {
                    0.0
                } else {
                    (HALF_PI * t).cos()
                }
            }
        }
    }

    #[inline]
    pub fn alpha_dot(&self, t: f64) -> f64 {
        match self {
            InterpolationSchedule::Ot => 1.0,
            InterpolationSchedule::Trigonometric => HALF_PI * (HALF_PI * t).cos(),
        }
    }

    #[inline]
    pub fn beta_dot(&self, t: f64) -> f64 {
        match self {
            InterpolationSchedule::Ot => -1.0,
            InterpolationSchedule::Trigonometric => -HALF_PI * (HALF_PI * t).sin(),
        }
    }
}

/// Admissible time window for score queries; the SNR is singular at 0 and 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeClamp {
    pub t_min: f64,
    pub t_max: f64,
}

impl Default for TimeClamp {
    fn default() -> Self {
        TimeClamp {
            t_min: 1e-3,
            t_max: 1.0 - 1e-3,
        }
    }
}

impl TimeClamp {
    /// `[t_min, 1 - 1/n_steps]`.
    pub fn for_steps(t_min: f64, n_steps: usize) -> Self {
        TimeClamp {
            t_min,
            t_max: 1.0 - 1.0 / n_steps.max(2) as f64,
        }
    }

    pub fn check(&self, t: f64) -> Result<()> {
        let slack = 1e-12;
        if t.is_finite() && t >= self.t_min - slack && t <= self.t_max + slack {
            Ok(())
        } else {
            Err(FlowError::Domain {
                t,
                lo: self.t_min,
                hi: self.t_max,
            })
        }
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.clamp(self.t_min, self.t_max)
    }
}

/// Log-derivatives entering the velocity-to-score conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrTerms {
    /// `d log(alpha/beta) / dt`
    pub log_snr_rate: f64,
    /// `d log(beta) / dt`
    pub log_beta_rate: f64,
    pub beta_sq: f64,
}

pub fn snr_terms(s: InterpolationSchedule, t: f64, clamp: &TimeClamp) -> Result<SnrTerms> {
    clamp.check(t)?;
    let (a, b) = (s.alpha(t), s.beta(t));
    let (ad, bd) = (s.alpha_dot(t), s.beta_dot(t));
    Ok(SnrTerms {
        log_snr_rate: ad / a - bd / b,
        log_beta_rate: bd / b,
        beta_sq: b * b,
    })
}
