//! MAP estimation for linear inverse problems under flow-matching priors.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense arrays, small linear algebra, seeded randomness, `FTEN` files
//! * [`schedule`]: interpolation paths and their signal-to-noise rates
//! * [`operators`]: forward operators with exact adjoints
//! * [`velocity`]: analytic Gaussian and MLP velocity fields, flow-matching training
//! * [`likelihood`]: trace estimation, trajectory log-likelihood, score conversion
//! * [`solvers`]: trajectory-matching reconstruction, global MAP, baselines
//! * [`analysis`]: local-objective decomposition, compliance, closed-form oracles
//! * [`metrics`]: PSNR / SSIM
//! * [`harness`]: configuration, synthetic data, batch experiments, exports

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod analysis;
pub mod error;
pub mod harness;
pub mod likelihood;
pub mod metrics;
pub mod operators;
pub mod optim;
pub mod par;
pub mod schedule;
pub mod solvers;
pub mod tensor;
pub mod velocity;

pub use error::{FlowError, Result};
