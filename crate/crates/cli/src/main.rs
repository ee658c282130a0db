use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use flowmap::analysis::{compliance_measure, theorem1_gap};
use flowmap::harness::{
    export_image, process_image, run_experiment, run_training, write_steps_csv, Experiment, ExperimentConfig,
    PriorSource,
};
use flowmap::metrics::evaluate;
use flowmap::operators::{make_operator, OperatorSpec};
use flowmap::schedule::InterpolationSchedule;
use flowmap::solvers::solve;
use flowmap::tensor::{Rng, Tensor};
use flowmap::velocity::{analytic_gaussian_velocity, GaussianDataPrior};

#[derive(Parser)]
#[command(name = "flowmap", version, about = "MAP reconstruction under flow-matching priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an MLP velocity field on a synthetic dataset.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides `output.dir`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconstruct one image of the configured dataset, or a given measurement.
    Solve {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// FTEN measurement to reconstruct instead of a synthesized one.
        #[arg(long)]
        measurement: Option<PathBuf>,
    },
    /// Run a batch experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gaussian denoising against the closed-form MAP.
    ValidateToy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convergence of the local-objective decomposition, or trajectory compliance.
    Analyze {
        #[arg(long)]
        what: Analysis,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        samples: usize,
    },
    /// Print `psnr,ssim,mse` of two FTEN tensors.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Write an FTEN image as binary PGM (`[H, W]`) or PPM (`[3, H, W]`).
    Export {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Analysis {
    Theorem1,
    Compliance,
}

fn load_config(path: &Path, out: Option<&Path>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?;
    if let Some(out) = out {
        cfg.set("output.dir", &out.to_string_lossy())?;
    }
    Ok(cfg)
}

fn init_threads() -> Result<()> {
    let threads = match std::env::var("FLOWMAP_THREADS") {
        Ok(v) => v.parse::<usize>().with_context(|| format!("FLOWMAP_THREADS = '{v}'"))?,
        Err(_) => 1,
    };
    rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x}"))
}

fn batch(cfg: &ExperimentConfig) -> Result<ExitCode> {
    let manifest = run_experiment(cfg)?;
    for w in &manifest.warnings {
        eprintln!("warning: {w}");
    }
    for (i, msg) in &manifest.failures {
        eprintln!("image {i} failed: {msg}");
    }
    println!("images: {} ok, {} failed", manifest.rows.len(), manifest.failures.len());
    for (name, agg) in [("psnr", manifest.psnr()), ("ssim", manifest.ssim()), ("mse", manifest.mse()), ("oracle_mse", manifest.oracle_mse())] {
        if let Some(a) = agg {
            println!("{name}: {:.6e} ± {:.6e}", a.mean, a.std);
        }
    }
    Ok(if manifest.all_failed() { ExitCode::FAILURE } else { ExitCode::SUCCESS })
}

fn solve_one(config: &Path, out: &Path, index: usize, measurement: Option<&Path>) -> Result<()> {
    let cfg = load_config(config, Some(out))?;
    let exp = Experiment::from_config(&cfg)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    match measurement {
        None => {
            let o = process_image(&exp, index)?;
            o.truth.save(out.join("truth.ften"))?;
            o.measurement.save(out.join("y.ften"))?;
            o.result.x1.save(out.join("x1.ften"))?;
            write_steps_csv(&out.join("steps.csv"), &o.result.per_step)?;
            println!("psnr,ssim,mse\n{},{},{}", o.metrics.psnr, fmt_opt(o.metrics.ssim), o.metrics.mse);
            if let Some(m) = o.oracle_mse() {
                println!("mse_to_oracle: {m:e}");
            }
        }
        Some(path) => {
            let y = Tensor::load(path)?;
            let field = exp.field.as_deref().context("configuration has no prior")?;
            let meas = exp.measurement.as_ref().context("configuration has no operator")?;
            let rng = Rng::new(exp.solver.seed);
            let r = solve(&exp.solver, field, exp.schedule, meas.operator.as_ref(), &y, &rng)?;
            r.x1.save(out.join("x1.ften"))?;
            write_steps_csv(&out.join("steps.csv"), &r.per_step)?;
            println!("wrote {}", out.join("x1.ften").display());
        }
    }
    Ok(())
}

fn analyze_theorem1(seed: u64) -> Result<()> {
    let d = 8;
    let sigma_y = 0.1;
    let mut rng = Rng::new(seed);
    let prior = GaussianDataPrior::random_wishart(d, 0.5, (-1.0, 1.0), &mut rng)?;
    let x0 = rng.normal_vec(d);
    let x1 = prior.ot_flow_map(&x0);
    let y: Vec<f64> = x1.iter().map(|v| v + sigma_y * rng.normal()).collect();
    let a = make_operator(&OperatorSpec::Identity, &[d])?;
    println!("n,gap,ratio_to_first");
    let mut first = None;
    for n in [5, 10, 20, 40, 80, 160] {
        let g = theorem1_gap(&prior, InterpolationSchedule::Ot, a.as_ref(), &y, &x0, n, sigma_y)?;
        let base = *first.get_or_insert(g.gap);
        println!("{n},{:.6e},{:.4}", g.gap, g.gap / base);
    }
    Ok(())
}

fn analyze_compliance(config: Option<&Path>, seed: u64, samples: usize) -> Result<()> {
    let rng = Rng::new(seed);
    let s = InterpolationSchedule::Ot;
    let report = match config {
        None => {
            let prior = GaussianDataPrior::random_wishart(2, 0.2, (-1.0, 1.0), &mut rng.fork("prior"))?;
            let field = analytic_gaussian_velocity(prior.clone(), s);
            compliance_measure(&field, s, |r| (r.normal_vec(2), prior.sample(r)), samples, 64, &rng)?
        }
        Some(path) => {
            let exp = Experiment::from_config(&load_config(path, None)?)?;
            let field = exp.field.clone().context("configuration has no prior")?;
            let d = field.dim();
            match &exp.prior {
                Some(PriorSource::Gaussian(p)) => {
                    let p = p.clone();
                    compliance_measure(field.as_ref(), s, move |r| (r.normal_vec(d), p.sample(r)), samples, 64, &rng)?
                }
                _ => {
                    let kind = exp.dataset.clone();
                    compliance_measure(
                        field.as_ref(),
                        s,
                        move |r| (r.normal_vec(d), kind.sample(r).expect("validated dataset").into_data()),
                        samples,
                        64,
                        &rng,
                    )?
                }
            }
        }
    };
    println!("# S = {:.6e} ± {:.6e}; bound satisfied: {}", report.s_value, report.s_std_error, report.bound_satisfied);
    println!("t,deviation,std_error");
    for ((t, dev), se) in report.times.iter().zip(&report.per_t_deviation).zip(&report.per_t_std_error) {
        println!("{t},{dev:.6e},{se:.6e}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::Train { config, out } => {
            let cfg = load_config(&config, out.as_deref())?;
            let outcome = run_training(&cfg)?;
            let tail = &outcome.losses[outcome.losses.len().saturating_sub(50)..];
            println!("final loss (last {} steps): {:.6e}", tail.len(), tail.iter().sum::<f64>() / tail.len() as f64);
            if let Some(dir) = cfg.get("output.dir") {
                println!("checkpoint: {}", Path::new(dir).join("model.flwm").display());
            }
        }
        Command::Solve { config, out, index, measurement } => solve_one(&config, &out, index, measurement.as_deref())?,
        Command::Run { config, out } => return batch(&load_config(&config, out.as_deref())?),
        Command::ValidateToy { config, out } => {
            let mut cfg = load_config(&config, out.as_deref())?;
            match cfg.get("task") {
                None => cfg.set("task", "denoise_gaussian_toy")?,
                Some("denoise_gaussian_toy") => {}
                Some(other) => bail!("validate-toy needs task = denoise_gaussian_toy, got '{other}'"),
            }
            return batch(&cfg);
        }
        Command::Analyze { what, config, seed, samples } => match what {
            Analysis::Theorem1 => analyze_theorem1(seed)?,
            Analysis::Compliance => analyze_compliance(config.as_deref(), seed, samples)?,
        },
        Command::Metrics { a, b } => {
            let x = Tensor::load(&a)?;
            let r = Tensor::load(&b)?;
            let m = evaluate(&x, &r)?;
            println!("{},{},{}", m.psnr, fmt_opt(m.ssim), m.mse);
        }
        Command::Export { input, output } => {
            export_image(&Tensor::load(&input)?, &output)?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
