//! Batch runs and their on-disk outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use sha2::{Digest, Sha256};

use super::{synthesize_dataset, Experiment, ExperimentConfig, PriorSource, Task};
use crate::analysis::gaussian_map_oracle_linear;
use crate::error::{FlowError, Result};
use crate::metrics::{evaluate, MetricReport};
use crate::par;
use crate::solvers::{solve, ReconstructionResult, StepRecord};
use crate::tensor::{mse, Rng, Tensor};
use crate::velocity::{train_flow_matching, TrainOutcome};

pub const STEPS_HEADER: &str = "t,objective,residual,trace";
pub const METRICS_HEADER: &str = "image_index,psnr,ssim,mse,wall_time_s";
const HISTOGRAM_BINS: usize = 40;

#[derive(Debug, Clone)]
pub struct ImageOutcome {
    pub index: usize,
    pub truth: Tensor,
    pub measurement: Tensor,
    pub result: ReconstructionResult,
    pub metrics: MetricReport,
    /// Closed-form MAP, when the prior is Gaussian.
    pub oracle: Option<Vec<f64>>,
}

impl ImageOutcome {
    pub fn oracle_mse(&self) -> Option<f64> {
        self.oracle.as_ref().map(|o| mse(self.result.x1.data(), o))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub index: usize,
    pub psnr: f64,
    pub ssim: Option<f64>,
    pub mse: f64,
    pub wall_time: f64,
    pub oracle_mse: Option<f64>,
}

/// Mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(Aggregate { mean, std })
    }
}

#[derive(Debug, Clone)]
pub struct RunManifest {
    pub config: ExperimentConfig,
    pub input_hash: String,
    pub rows: Vec<MetricRow>,
    pub failures: Vec<(usize, String)>,
    pub warnings: Vec<String>,
    pub total_wall_time: f64,
}

impl RunManifest {
    fn column(&self, f: impl Fn(&MetricRow) -> Option<f64>) -> Option<Aggregate> {
        Aggregate::of(&self.rows.iter().filter_map(f).collect::<Vec<_>>())
    }

    pub fn psnr(&self) -> Option<Aggregate> {
        self.column(|r| Some(r.psnr))
    }

    pub fn ssim(&self) -> Option<Aggregate> {
        self.column(|r| r.ssim)
    }

    pub fn mse(&self) -> Option<Aggregate> {
        self.column(|r| Some(r.mse))
    }

    pub fn oracle_mse(&self) -> Option<Aggregate> {
        self.column(|r| r.oracle_mse)
    }

    pub fn all_failed(&self) -> bool {
        self.rows.is_empty() && !self.failures.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str("# flowmap run manifest\n[config]\n");
        s.push_str(&self.config.echo());
        let _ = writeln!(s, "[inputs]\nhash = {}", self.input_hash);
        let _ = writeln!(s, "[rows]\n{METRICS_HEADER}");
        for r in &self.rows {
            let _ = writeln!(s, "{}", metric_line(r, true));
        }
        s.push_str("[aggregate]\n");
        let _ = writeln!(s, "images = {}\nfailed = {}", self.rows.len(), self.failures.len());
        for (name, agg) in [
            ("psnr", self.psnr()),
            ("ssim", self.ssim()),
            ("mse", self.mse()),
            ("oracle_mse", self.oracle_mse()),
        ] {
            if let Some(a) = agg {
                let _ = writeln!(s, "{name} = {:e} ± {:e}", a.mean, a.std);
            }
        }
        let _ = writeln!(s, "wall_time_s = {:.3}", self.total_wall_time);
        if !self.failures.is_empty() {
            s.push_str("[failures]\n");
            for (i, msg) in &self.failures {
                let _ = writeln!(s, "{i}: {msg}");
            }
        }
        if !self.warnings.is_empty() {
            s.push_str("[warnings]\n");
            for w in &self.warnings {
                let _ = writeln!(s, "{w}");
            }
        }
        s
    }

    /// The `[config]` section of a rendered manifest.
    pub fn parse_config_echo(rendered: &str) -> Result<ExperimentConfig> {
        let section: String = rendered
            .lines()
            .skip_while(|l| *l != "[config]")
            .skip(1)
            .take_while(|l| !l.starts_with('['))
            .map(|l| format!("{l}\n"))
            .collect();
        ExperimentConfig::parse(&section)
    }
}

fn fmt_f64(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:e}")
    }
}

fn metric_line(r: &MetricRow, timing: bool) -> String {
    format!(
        "{},{},{},{},{}",
        r.index,
        fmt_f64(r.psnr),
        r.ssim.map_or_else(|| "nan".to_string(), fmt_f64),
        fmt_f64(r.mse),
        if timing { format!("{:.6}", r.wall_time) } else { "0".to_string() }
    )
}

fn git_style_hash(parts: &[&[u8]]) -> String {
    let len: usize = parts.iter().map(|p| p.len()).sum();
    let mut h = Sha256::new();
    h.update(format!("blob {len}\0").as_bytes());
    for p in parts {
        h.update(p);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn input_hash(exp: &Experiment) -> Result<String> {
    let echo: String = exp
        .config
        .echo()
        .lines()
        .filter(|l| !l.starts_with("output.dir "))
        .map(|l| format!("{l}\n"))
        .collect();
    let ckpt = match exp.config.get("prior.checkpoint") {
        Some(p) if matches!(exp.prior, Some(PriorSource::Mlp(_))) => {
            std::fs::read(p).map_err(|e| FlowError::io(p, e))?
        }
        _ => Vec::new(),
    };
    Ok(git_style_hash(&[echo.as_bytes(), &ckpt]))
}

/// Synthesize, measure, solve and score image `index`.
pub fn process_image(exp: &Experiment, index: usize) -> Result<ImageOutcome> {
    let field = exp.field.as_deref().ok_or_else(|| FlowError::config("experiment has no prior"))?;
    let meas = exp.measurement.as_ref().ok_or_else(|| FlowError::config("experiment has no operator"))?;
    let truth = exp.dataset.sample(&mut Rng::new(exp.dataset_seed).substream(index as u64))?;
    let run_rng = Rng::new(exp.solver.seed).substream(index as u64);
    let y = meas.measure(&truth, &mut run_rng.fork("measure"))?;
    let op = meas.operator.as_ref();
    let result = solve(&exp.solver, field, exp.schedule, op, &y, &run_rng.fork("solve"))?;
    let metrics = evaluate(&result.x1, &truth)?;
    let oracle = match &exp.prior {
        Some(PriorSource::Gaussian(p)) if meas.sigma_y > 0.0 => {
            Some(gaussian_map_oracle_linear(p, op, y.data(), meas.sigma_y)?)
        }
        _ => None,
    };
    Ok(ImageOutcome {
        index,
        truth,
        measurement: y,
        result,
        metrics,
        oracle,
    })
}

pub fn write_steps_csv(path: &Path, steps: &[StepRecord]) -> Result<()> {
    let mut s = format!("{STEPS_HEADER}\n");
    for r in steps {
        let trace = r.trace.map_or_else(String::new, |v| format!("{v:e}"));
        let _ = writeln!(s, "{:e},{:e},{:e},{trace}", r.t, r.objective, r.residual);
    }
    write_file(path, s.as_bytes())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| FlowError::io(path, e))
}

fn histogram_csv(diffs: &[f64]) -> String {
    let mut s = String::from("bin_lo,bin_hi,count\n");
    if diffs.is_empty() {
        return s;
    }
    let lo = diffs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = diffs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / HISTOGRAM_BINS as f64 } else { 1.0 };
    let mut counts = [0usize; HISTOGRAM_BINS];
    for d in diffs {
        let b = (((d - lo) / width) as usize).min(HISTOGRAM_BINS - 1);
        counts[b] += 1;
    }
    for (b, c) in counts.iter().enumerate() {
        let a = lo + b as f64 * width;
        let _ = writeln!(s, "{:e},{:e},{c}", a, a + width);
    }
    s
}

/// Run every image of the configured dataset and write
/// `image_NNNN_{truth,y,x1}.ften`, `image_NNNN_steps.csv`, `metrics.csv`
/// and `manifest.txt` (plus oracle and difference-histogram CSVs for
/// Gaussian priors) into `output.dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunManifest> {
    let exp = Experiment::from_config(cfg)?;
    if exp.task == Task::Train {
        return Err(FlowError::config("task = train is run by run_training"));
    }
    let out_dir: PathBuf = exp
        .output_dir
        .clone()
        .ok_or_else(|| FlowError::config("missing required key 'output.dir'"))?;
    std::fs::create_dir_all(&out_dir).map_err(|e| FlowError::io(&out_dir, e))?;
    let start = Instant::now();
    let input_hash = input_hash(&exp)?;

    let outcomes: Vec<Result<ImageOutcome>> = par::map_range(exp.count, |i| process_image(&exp, i));

    let mut warnings = Vec::new();
    if exp.count == 0 {
        warnings.push("dataset.count = 0: nothing to do".to_string());
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    let mut metrics = format!("{METRICS_HEADER}\n");
    let mut oracle_csv = String::from("image_index,mse_to_oracle\n");
    let mut diffs = Vec::new();
    for (i, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Err(e) => failures.push((i, e.to_string())),
            Ok(o) => {
                let file = |suffix: &str| out_dir.join(format!("image_{i:04}_{suffix}"));
                o.truth.save(file("truth.ften"))?;
                o.measurement.save(file("y.ften"))?;
                o.result.x1.save(file("x1.ften"))?;
                write_steps_csv(&file("steps.csv"), &o.result.per_step)?;
                let row = MetricRow {
                    index: i,
                    psnr: o.metrics.psnr,
                    ssim: o.metrics.ssim,
                    mse: o.metrics.mse,
                    wall_time: o.result.wall_time,
                    oracle_mse: o.oracle_mse(),
                };
                let _ = writeln!(metrics, "{}", metric_line(&row, exp.record_timing));
                if let (Some(m), Some(oracle)) = (row.oracle_mse, &o.oracle) {
                    let _ = writeln!(oracle_csv, "{i},{m:e}");
                    diffs.extend(o.result.x1.data().iter().zip(oracle).map(|(a, b)| a - b));
                }
                rows.push(row);
            }
        }
    }
    write_file(&out_dir.join("metrics.csv"), metrics.as_bytes())?;
    if rows.iter().any(|r| r.oracle_mse.is_some()) {
        write_file(&out_dir.join("oracle.csv"), oracle_csv.as_bytes())?;
        write_file(&out_dir.join("oracle_diff_histogram.csv"), histogram_csv(&diffs).as_bytes())?;
    }
    let manifest = RunManifest {
        config: exp.config.clone(),
        input_hash,
        rows,
        failures,
        warnings,
        total_wall_time: start.elapsed().as_secs_f64(),
    };
    write_file(&out_dir.join("manifest.txt"), manifest.render().as_bytes())?;
    Ok(manifest)
}

/// Train an MLP velocity on fresh draws from the configured dataset; writes
/// `model.flwm` and `losses.csv` when `output.dir` is set.
pub fn run_training(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let exp = Experiment::from_config(cfg)?;
    let dim: usize = exp.dataset.shape().iter().product();
    let kind = exp.dataset.clone();
    let mut rng = Rng::new(exp.train_seed);
    let outcome = train_flow_matching(dim, &exp.train, &mut rng, |r| {
        kind.sample(r).expect("dataset validated").into_data()
    })?;
    if let Some(dir) = &exp.output_dir {
        std::fs::create_dir_all(dir).map_err(|e| FlowError::io(dir, e))?;
        outcome.field.save(dir.join("model.flwm"))?;
        let mut s = String::from("step,loss\n");
        for (i, l) in outcome.losses.iter().enumerate() {
            let _ = writeln!(s, "{i},{l:e}");
        }
        write_file(&dir.join("losses.csv"), s.as_bytes())?;
    }
    Ok(outcome)
}

/// Convenience for callers that already hold a dataset.
pub fn dataset_for(exp: &Experiment) -> Result<Vec<Tensor>> {
    synthesize_dataset(&exp.dataset, exp.count, &Rng::new(exp.dataset_seed))
}
