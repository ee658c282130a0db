//! Experiment orchestration: configuration, synthetic data, batch runs and
//! file outputs.

mod config;
mod dataset;
mod export;
mod run;

pub use config::{ExperimentConfig, KNOWN_KEYS};
pub use dataset::{synthesize_dataset, DatasetKind};
pub use export::{encode_image, export_image};
pub use run::{
    dataset_for, process_image, run_experiment, run_training, write_steps_csv, Aggregate, ImageOutcome,
    MetricRow, RunManifest, METRICS_HEADER, STEPS_HEADER,
};

use std::path::PathBuf;
use std::sync::Arc;

use crate::error::{FlowError, Result};
use crate::likelihood::TraceEstimator;
use crate::operators::{make_operator, MeasurementModel, OperatorParams, OperatorSpec};
use crate::schedule::InterpolationSchedule;
use crate::solvers::{DataWeight, SolverConfig, SolverVariant};
use crate::tensor::Rng;
use crate::velocity::{analytic_gaussian_velocity, GaussianDataPrior, MlpVelocity, TrainConfig, VelocityField};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Gaussian prior and data; reconstructions are also scored against the closed-form MAP.
    DenoiseGaussianToy,
    /// Any prior, operator and dataset.
    Reconstruct,
    /// Fit an MLP velocity to a synthetic dataset.
    Train,
}

impl Task {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "denoise_gaussian_toy" => Ok(Task::DenoiseGaussianToy),
            "reconstruct" => Ok(Task::Reconstruct),
            "train" => Ok(Task::Train),
            other => Err(FlowError::config(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub enum PriorSource {
    Gaussian(GaussianDataPrior),
    Mlp(Arc<MlpVelocity>),
}

/// A configuration resolved into concrete objects.
#[derive(Clone)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub task: Task,
    pub schedule: InterpolationSchedule,
    pub prior: Option<PriorSource>,
    pub field: Option<Arc<dyn VelocityField>>,
    pub measurement: Option<MeasurementModel>,
    pub solver: SolverConfig,
    pub dataset: DatasetKind,
    pub count: usize,
    pub dataset_seed: u64,
    pub train: TrainConfig,
    pub train_seed: u64,
    pub output_dir: Option<PathBuf>,
    pub record_timing: bool,
}

fn gaussian_prior(cfg: &ExperimentConfig) -> Result<GaussianDataPrior> {
    let d: usize = cfg.get_or("prior.dim", 16)?;
    if d == 0 {
        return Err(FlowError::config("prior.dim must be positive"));
    }
    let range = (cfg.get_or("prior.mean_lo", 0.2)?, cfg.get_or("prior.mean_hi", 0.8)?);
    let mut rng = Rng::new(cfg.get_or("prior.seed", 0u64)?);
    match cfg.get("prior.spectrum").unwrap_or("logspace") {
        "logspace" => {
            let min_eig: f64 = cfg.get_or("prior.min_eig", 1e-3)?;
            if !(min_eig > 0.0 && min_eig <= 1.0) {
                return Err(FlowError::config("prior.min_eig must lie in (0, 1]"));
            }
            let spectrum: Vec<f64> = (0..d)
                .map(|k| {
                    let frac = if d == 1 { 0.0 } else { k as f64 / (d - 1) as f64 };
                    min_eig.powf(frac)
                })
                .collect();
            GaussianDataPrior::with_spectrum(&spectrum, range, &mut rng)
        }
        "wishart" => GaussianDataPrior::random_wishart(d, cfg.get_or("prior.shift", 0.3)?, range, &mut rng),
        other => Err(FlowError::config(format!("unknown prior.spectrum '{other}'"))),
    }
}

fn dataset_kind(cfg: &ExperimentConfig, prior: Option<&PriorSource>) -> Result<DatasetKind> {
    let default_kind = match prior {
        Some(PriorSource::Gaussian(_)) => "gaussian",
        _ => "smooth_blobs",
    };
    let h = cfg.get_or("dataset.height", 16usize)?;
    let w = cfg.get_or("dataset.width", 16usize)?;
    let kind = match cfg.get("dataset.kind").unwrap_or(default_kind) {
        "gaussian" => match prior {
            Some(PriorSource::Gaussian(p)) => DatasetKind::Gaussian {
                mean: p.mu.clone(),
                lower: p.sigma.cholesky().lower().clone(),
            },
            _ => return Err(FlowError::config("dataset.kind = gaussian needs prior.kind = gaussian")),
        },
        "smooth_blobs" => DatasetKind::SmoothBlobs {
            height: h,
            width: w,
            blobs: cfg.get_or("dataset.blobs", 3)?,
        },
        "checkerboard" => DatasetKind::Checkerboard {
            height: h,
            width: w,
            cell: cfg.get_or("dataset.cell", 4)?,
        },
        other => return Err(FlowError::config(format!("unknown dataset.kind '{other}'"))),
    };
    kind.validate()?;
    Ok(kind)
}

fn operator_spec(cfg: &ExperimentConfig) -> Result<OperatorSpec> {
    let d = OperatorParams::default();
    let rect = match cfg.get("operator.rect") {
        None => None,
        Some(_) => {
            let r: Vec<usize> = cfg.list_or("operator.rect", vec![])?;
            let arr: [usize; 4] = r
                .try_into()
                .map_err(|_| FlowError::config("operator.rect needs four values: top,left,height,width"))?;
            Some(arr)
        }
    };
    let p = OperatorParams {
        mask_fraction: cfg.get_or("operator.mask_fraction", d.mask_fraction)?,
        rect,
        factor: cfg.get_or("operator.factor", d.factor)?,
        blur_kernel: cfg.get_or("operator.blur_kernel", d.blur_kernel)?,
        blur_sigma: cfg.get_or("operator.blur_sigma", d.blur_sigma)?,
        rate: cfg.get_or("operator.rate", d.rate)?,
        seed: cfg.get_or("operator.seed", d.seed)?,
        sign_seed: cfg.get_or("operator.sign_seed", d.sign_seed)?,
    };
    OperatorSpec::from_kind(cfg.get("operator.kind").unwrap_or("identity"), &p)
}

/// The toy task defaults `lambda` to the Gaussian likelihood weight `1 / (2 sigma_y^2)`.
fn solver_config(cfg: &ExperimentConfig, task: Task, sigma_y: f64) -> Result<SolverConfig> {
    let d = SolverConfig::default();
    let lambda = match task {
        Task::DenoiseGaussianToy if sigma_y > 0.0 => 0.5 / (sigma_y * sigma_y),
        _ => d.guidance_weight,
    };
    let probes = cfg.get_or("solver.trace_probes", 16usize)?;
    let threshold = cfg.get_or("solver.exact_threshold", 64usize)?;
    let c = SolverConfig {
        variant: SolverVariant::from_name(cfg.get("solver.variant").unwrap_or("ictm"))?,
        n_steps: cfg.get_or("solver.N", d.n_steps)?,
        inner_iters: cfg.get_or("solver.K", d.inner_iters)?,
        step_size: cfg.get_or("solver.eta", d.step_size)?,
        guidance_weight: cfg.get_or("solver.lambda", lambda)?,
        sigma_y,
        seed: cfg.get_or("solver.seed", d.seed)?,
        data_weight: match cfg.get("solver.weight").unwrap_or("lambda") {
            "lambda" => DataWeight::Lambda,
            "exact" => DataWeight::Exact,
            other => return Err(FlowError::config(format!("unknown solver.weight '{other}'"))),
        },
        trace: TraceEstimator::Auto {
            exact_threshold: threshold,
            probes,
        },
        t_min: d.t_min,
        outer_iters: cfg.get_or("solver.outer_iters", d.outer_iters)?,
        outer_lr_final: cfg.get_or("solver.outer_lr_final", d.outer_lr_final)?,
    };
    c.validate()?;
    Ok(c)
}

fn train_config(cfg: &ExperimentConfig) -> Result<TrainConfig> {
    let d = TrainConfig::default();
    let lr = cfg.get_or("train.lr", d.lr)?;
    Ok(TrainConfig {
        steps: cfg.get_or("train.steps", d.steps)?,
        batch: cfg.get_or("train.batch", d.batch)?,
        lr,
        lr_final: cfg.get_or("train.lr_final", lr)?,
        hidden: cfg.list_or("train.hidden", d.hidden)?,
        schedule: InterpolationSchedule::Ot,
    })
}

impl Experiment {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let task = Task::from_name(cfg.require("task")?)?;
        let schedule = InterpolationSchedule::Ot;
        let prior = match task {
            Task::Train => None,
            Task::DenoiseGaussianToy => match cfg.get("prior.kind").unwrap_or("gaussian") {
                "gaussian" => Some(PriorSource::Gaussian(gaussian_prior(cfg)?)),
                _ => return Err(FlowError::config("denoise_gaussian_toy needs prior.kind = gaussian")),
            },
            Task::Reconstruct => match cfg.require("prior.kind")? {
                "gaussian" => Some(PriorSource::Gaussian(gaussian_prior(cfg)?)),
                "mlp" => Some(PriorSource::Mlp(Arc::new(MlpVelocity::load(cfg.require("prior.checkpoint")?)?))),
                other => return Err(FlowError::config(format!("unknown prior.kind '{other}'"))),
            },
        };
        let dataset = dataset_kind(cfg, prior.as_ref())?;
        let shape = dataset.shape();
        let n: usize = shape.iter().product();

        let field: Option<Arc<dyn VelocityField>> = match &prior {
            None => None,
            Some(PriorSource::Gaussian(p)) => Some(Arc::new(analytic_gaussian_velocity(p.clone(), schedule))),
            Some(PriorSource::Mlp(m)) => Some(m.clone()),
        };
        if let Some(f) = &field {
            if f.dim() != n {
                return Err(FlowError::config(format!(
                    "prior dimension {} does not match data shape {shape:?}",
                    f.dim()
                )));
            }
        }
        let sigma_y: f64 = cfg.get_or("operator.sigma_y", 0.1)?;
        let measurement = match task {
            Task::Train => None,
            _ => Some(MeasurementModel::new(make_operator(&operator_spec(cfg)?, &shape)?, sigma_y)?),
        };
        let solver = solver_config(cfg, task, sigma_y)?;
        Ok(Experiment {
            config: cfg.clone(),
            task,
            schedule,
            prior,
            field,
            measurement,
            solver,
            dataset,
            count: cfg.get_or("dataset.count", 1)?,
            dataset_seed: cfg.get_or("dataset.seed", 0)?,
            train: train_config(cfg)?,
            train_seed: cfg.get_or("train.seed", 0)?,
            output_dir: cfg.get("output.dir").map(PathBuf::from),
            record_timing: cfg.get_or("output.timing", false)?,
        })
    }
}
