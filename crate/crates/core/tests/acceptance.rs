//! Acceptance suite. Runs every criterion in order and prints one line each:
//!
//! ```text
//! [PASS] 01 score round-trip          max rel err 3.1e-15              (0.01s / 1s)
//! ```
//!
//! Pass a substring to run a subset, e.g. `cargo test --test acceptance -- compliance`.
//! Exits nonzero when any selected criterion fails or overruns its budget.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use flowmap::analysis::{compliance_measure, gaussian_map_oracle, theorem1_gap};
use flowmap::harness::{synthesize_dataset, DatasetKind, Experiment, ExperimentConfig, PriorSource};
use flowmap::likelihood::{draw_probes, hutchinson_trace, score_from_velocity, AuxiliaryPath, TraceEstimator};
use flowmap::metrics::{psnr, psnr_from_mse, ssim};
use flowmap::operators::{make_operator, MeasurementModel, OperatorSpec};
use flowmap::schedule::{InterpolationSchedule, TimeClamp};
use flowmap::solvers::{solve, SolverConfig, SolverVariant};
use flowmap::tensor::{dot, mse, norm, sub, Matrix, Rng, Tensor};
use flowmap::velocity::{
    analytic_gaussian_velocity, train_flow_matching, GaussianDataPrior, LinearField, MlpVelocity, TrainConfig,
    TrainOutcome, VelocityField,
};

const OT: InterpolationSchedule = InterpolationSchedule::Ot;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    norm(&sub(a, b)) / norm(b).max(1e-300)
}

fn toy_prior() -> GaussianDataPrior {
    let cfg = ExperimentConfig::from_pairs(&[("task", "denoise_gaussian_toy")]).expect("toy config");
    match Experiment::from_config(&cfg).expect("toy experiment").prior {
        Some(PriorSource::Gaussian(p)) => p,
        _ => unreachable!("toy task has a Gaussian prior"),
    }
}

/// `(x, y, x*)` for toy measurement `i`.
fn toy_instance(prior: &GaussianDataPrior, i: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut r = Rng::new(100).substream(i);
    let x = prior.sample(&mut r);
    let y: Vec<f64> = x.iter().map(|v| v + 0.1 * r.normal()).collect();
    let xs = gaussian_map_oracle(prior, &y, 0.1).expect("oracle");
    (x, y, xs)
}

fn toy_ictm(n_steps: usize) -> SolverConfig {
    SolverConfig {
        variant: SolverVariant::Ictm,
        n_steps,
        inner_iters: 10,
        step_size: 1e-2,
        guidance_weight: 50.0,
        sigma_y: 0.1,
        ..Default::default()
    }
}

fn toy_solve(prior: &GaussianDataPrior, cfg: &SolverConfig, i: u64, y: &[f64]) -> Vec<f64> {
    let field = analytic_gaussian_velocity(prior.clone(), OT);
    let a = make_operator(&OperatorSpec::Identity, &[prior.dim()]).expect("identity");
    let rng = Rng::new(100).substream(i).fork("solve");
    solve(cfg, &field, OT, a.as_ref(), &Tensor::vector(y.to_vec()), &rng)
        .expect("solve")
        .x1
        .into_data()
}

// ---------------------------------------------------------------------------

fn c01_score_round_trip() -> Check {
    let mut rng = Rng::new(11);
    let prior = GaussianDataPrior::random_wishart(8, 0.3, (-1.0, 1.0), &mut rng).map_err(|e| e.to_string())?;
    let field = analytic_gaussian_velocity(prior.clone(), OT);
    let clamp = TimeClamp::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let t = rng.uniform_range(0.05, 0.95);
        let x = rng.normal_vec(8);
        let got = score_from_velocity(&field, OT, &x, t, &clamp).map_err(|e| e.to_string())?;
        let centered = sub(&x, &prior.marginal_mean(OT, t));
        let want: Vec<f64> = prior.marginal_cov(OT, t).solve(&centered).iter().map(|v| -v).collect();
        worst = worst.max(rel(&got, &want));
    }
    ensure(worst <= 1e-8, format!("max rel err {worst:.2e}"))
}

fn c02_toy_map() -> Check {
    let prior = toy_prior();
    let (mut e100, mut e10) = (Vec::new(), Vec::new());
    for i in 0..50 {
        let (_, y, xs) = toy_instance(&prior, i);
        e100.push(mse(&toy_solve(&prior, &toy_ictm(100), i, &y), &xs));
        e10.push(mse(&toy_solve(&prior, &toy_ictm(10), i, &y), &xs));
    }
    let (m100, m10) = (mean(&e100), mean(&e10));
    ensure(m100 <= 1e-3 && m100 <= m10, format!("MSE to x*: N=100 {m100:.2e}, N=10 {m10:.2e}"))
}

fn c03_decomposition() -> Check {
    let d = 8;
    let mut rng = Rng::new(2);
    let prior = GaussianDataPrior::random_wishart(d, 0.5, (-1.0, 1.0), &mut rng).map_err(|e| e.to_string())?;
    let x0 = rng.normal_vec(d);
    let x1 = prior.ot_flow_map(&x0);
    let y: Vec<f64> = x1.iter().map(|v| v + 0.1 * rng.normal()).collect();
    let a = make_operator(&OperatorSpec::Identity, &[d]).map_err(|e| e.to_string())?;
    let gaps = [5, 10, 20, 40, 80]
        .iter()
        .map(|&n| theorem1_gap(&prior, OT, a.as_ref(), &y, &x0, n, 0.1).map(|g| g.gap))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let strictly = gaps.windows(2).all(|w| w[1] < w[0]);
    let ratio = gaps[4] / gaps[0];
    let listed: Vec<String> = gaps.iter().map(|g| format!("{g:.3e}")).collect();
    ensure(strictly && ratio < 0.2, format!("gaps [{}], ratio {ratio:.3}", listed.join(", ")))
}

fn c04_auxiliary_law() -> Check {
    let prior = toy_prior();
    let sigma = 0.1;
    let a = make_operator(&OperatorSpec::MaskRandom { fraction: 0.5, seed: 4 }, &[prior.dim()])
        .map_err(|e| e.to_string())?;
    let meas = MeasurementModel::new(a.clone(), sigma).map_err(|e| e.to_string())?;
    let times = [0.25, 0.5, 0.75];
    let mut sums = [(0.0, 0.0, 0usize); 3];
    let mut rng = Rng::new(44);
    for _ in 0..10_000 {
        let x1 = prior.sample(&mut rng);
        let x0 = rng.normal_vec(prior.dim());
        let y = meas.measure(&Tensor::vector(x1.clone()), &mut rng).map_err(|e| e.to_string())?;
        let path = AuxiliaryPath::new(y.into_data(), a.forward(&x0), OT).map_err(|e| e.to_string())?;
        for (k, &t) in times.iter().enumerate() {
            let xt: Vec<f64> = x1.iter().zip(&x0).map(|(p, q)| OT.alpha(t) * p + OT.beta(t) * q).collect();
            for r in sub(&path.at(t), &a.forward(&xt)) {
                sums[k].0 += r;
                sums[k].1 += r * r;
                sums[k].2 += 1;
            }
        }
    }
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for (k, &t) in times.iter().enumerate() {
        let (s, s2, n) = sums[k];
        let n = n as f64;
        let std = ((s2 - s * s / n) / (n - 1.0)).sqrt();
        let target = OT.alpha(t) * sigma;
        worst = worst.max((std / target - 1.0).abs());
        parts.push(format!("t={t}: {std:.4}/{target:.4}"));
    }
    ensure(worst <= 0.05, format!("{} (max dev {:.2}%)", parts.join(", "), 100.0 * worst))
}

fn c05_global_map_chain() -> Check {
    let prior = toy_prior();
    let global = SolverConfig {
        variant: SolverVariant::GlobalMap,
        step_size: 0.05,
        outer_iters: 1500,
        sigma_y: 0.1,
        ..Default::default()
    };
    let (mut to_oracle, mut ictm_to_global) = (Vec::new(), Vec::new());
    for i in 0..10 {
        let (_, y, xs) = toy_instance(&prior, i);
        let xg = toy_solve(&prior, &global, i, &y);
        to_oracle.push(mse(&xg, &xs));
        ictm_to_global.push(mse(&toy_solve(&prior, &toy_ictm(100), i, &y), &xg));
    }
    let (g, c) = (mean(&to_oracle), mean(&ictm_to_global));
    ensure(g <= 1e-4 && c <= 1e-3, format!("global->x* {g:.2e}, ICTM->global {c:.2e}"))
}

fn c06_differentiation() -> Check {
    let d = 6;
    let mut rng = Rng::new(61);
    let mut f = MlpVelocity::new(d, &[24, 24], &mut rng);
    for p in f.params_mut() {
        *p += 0.3 * rng.normal();
    }
    let h = 1e-5;
    let shift = |x: &[f64], u: &[f64], s: f64| -> Vec<f64> { x.iter().zip(u).map(|(a, b)| a + s * b).collect() };
    let (mut first, mut second) = (0.0f64, 0.0f64);
    for _ in 0..50 {
        let x = rng.normal_vec(d);
        let t = rng.uniform();
        let u = rng.normal_vec(d);
        let w = rng.normal_vec(d);

        let fd_jvp: Vec<f64> = sub(&f.eval(&shift(&x, &u, h), t), &f.eval(&shift(&x, &u, -h), t))
            .iter()
            .map(|v| v / (2.0 * h))
            .collect();
        first = first.max(rel(&f.jvp(&x, t, &u), &fd_jvp));

        let fd_vjp: Vec<f64> = (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                (dot(&w, &f.eval(&shift(&x, &e, h), t)) - dot(&w, &f.eval(&shift(&x, &e, -h), t))) / (2.0 * h)
            })
            .collect();
        first = first.max(rel(&f.vjp(&x, t, &w), &fd_vjp));

        let eps = rng.rademacher_vec(d);
        let quad = |z: &[f64]| dot(&eps, &f.jvp(z, t, &eps));
        let fd_probe: Vec<f64> = (0..d)
            .map(|i| {
                let mut e = vec![0.0; d];
                e[i] = 1.0;
                (quad(&shift(&x, &e, h)) - quad(&shift(&x, &e, -h))) / (2.0 * h)
            })
            .collect();
        second = second.max(rel(&f.grad_of_jvp_probe(&x, t, &eps), &fd_probe));

        let mut pgrad = vec![0.0; f.params().len()];
        let tape = f.forward(&x, t);
        f.backward(&tape, &w, Some(&mut pgrad));
        let dir = rng.normal_vec(pgrad.len());
        let base = f.params().to_vec();
        let loss_at = |g: &mut MlpVelocity, s: f64| {
            g.params_mut().copy_from_slice(&shift(&base, &dir, s));
            dot(&w, &g.eval(&x, t))
        };
        let fd_param = (loss_at(&mut f, h) - loss_at(&mut f, -h)) / (2.0 * h);
        f.params_mut().copy_from_slice(&base);
        first = first.max(rel(&[dot(&pgrad, &dir)], &[fd_param]));
    }
    ensure(
        first <= 1e-5 && second <= 1e-4,
        format!("max rel err: first-order {first:.2e}, probe gradient {second:.2e}"),
    )
}

fn c07_trace() -> Check {
    let mut rng = Rng::new(71);
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    for d in [8, 32, 64] {
        let m = Matrix::from_fn(d, d, |i, j| {
            let noise = 0.3 * rng.normal() / (d as f64).sqrt();
            if i == j {
                rng.uniform_range(0.5, 2.0) + noise
            } else {
                noise
            }
        });
        let exact = m.trace();
        let field = LinearField::new(m);
        let x = rng.normal_vec(d);
        let est = hutchinson_trace(&field, &x, 0.5, &draw_probes(d, 10_000, &mut rng));
        let e = (est - exact).abs() / exact.abs();
        worst = worst.max(e);
        parts.push(format!("d={d}: {:.3}%", 100.0 * e));
    }
    ensure(worst <= 0.01, parts.join(", "))
}

struct Trained2d {
    prior: GaussianDataPrior,
    outcome: TrainOutcome,
}

static TRAINED_2D: OnceLock<Trained2d> = OnceLock::new();

fn trained_2d() -> &'static Trained2d {
    TRAINED_2D.get_or_init(|| {
        let prior = GaussianDataPrior::random_wishart(2, 0.2, (-1.0, 1.0), &mut Rng::new(21)).expect("prior");
        let cfg = TrainConfig {
            steps: 3000,
            batch: 256,
            lr: 3e-3,
            lr_final: 1e-4,
            hidden: vec![64, 64],
            schedule: OT,
        };
        let outcome = train_flow_matching(2, &cfg, &mut Rng::new(5), |r| prior.sample(r)).expect("training");
        Trained2d { prior, outcome }
    })
}

fn c08_compliance() -> Check {
    let tr = trained_2d();
    let prior = &tr.prior;
    let rep = compliance_measure(&tr.outcome.field, OT, |r| (r.normal_vec(2), prior.sample(r)), 4000, 64, &Rng::new(3))
        .map_err(|e| e.to_string())?;
    let mut worst = f64::NEG_INFINITY;
    for (dev, se) in rep.per_t_deviation.iter().zip(&rep.per_t_std_error) {
        let limit = rep.s_value + 3.0 * (rep.s_std_error.powi(2) + se.powi(2)).sqrt();
        worst = worst.max(dev - limit);
    }
    let max_dev = rep.per_t_deviation.iter().cloned().fold(0.0, f64::max);
    ensure(
        rep.bound_satisfied && worst <= 0.0,
        format!("S {:.3} ± {:.3}, max deviation {max_dev:.3} over {} times", rep.s_value, rep.s_std_error, rep.times.len()),
    )
}

fn c11_training() -> Check {
    let tr = trained_2d();
    let analytic = analytic_gaussian_velocity(tr.prior.clone(), OT);
    let field = &tr.outcome.field;
    let mut r = Rng::new(77);
    let n = 4000;
    let mut ratios = Vec::with_capacity(n);
    for _ in 0..n {
        let t = r.uniform_range(0.1, 0.9);
        let x1 = tr.prior.sample(&mut r);
        let x0 = r.normal_vec(2);
        let xt: Vec<f64> = x1.iter().zip(&x0).map(|(a, b)| t * a + (1.0 - t) * b).collect();
        let want = analytic.eval(&xt, t);
        ratios.push(norm(&sub(&field.eval(&xt, t), &want)) / norm(&want).max(1e-3));
    }
    let err = mean(&ratios);
    let windows: Vec<f64> = tr.outcome.losses.chunks(50).map(mean).collect();
    let (head, tail) = (windows[0], *windows.last().unwrap());
    let never_above_head = windows.iter().skip(1).all(|w| *w < head);
    let k = windows.len() as f64;
    let tbar = (k - 1.0) / 2.0;
    let wbar = mean(&windows);
    let slope: f64 = windows.iter().enumerate().map(|(i, w)| (i as f64 - tbar) * (w - wbar)).sum::<f64>();
    ensure(
        err <= 0.10 && never_above_head && slope < 0.0 && tail < head,
        format!("mean rel err {:.2}%, loss windows {head:.3} -> {tail:.3}", 100.0 * err),
    )
}

const IMAGE_SIDE: usize = 16;
const IMAGE_STEPS: usize = 1500;
const IMAGE_HIDDEN: usize = 128;
const IMAGE_SIGMA: f64 = 0.01;
const IMAGE_COUNT: usize = 20;

static IMAGE_PRIOR: OnceLock<MlpVelocity> = OnceLock::new();

fn blobs() -> DatasetKind {
    DatasetKind::SmoothBlobs { height: IMAGE_SIDE, width: IMAGE_SIDE, blobs: 3 }
}

fn image_prior() -> &'static MlpVelocity {
    IMAGE_PRIOR.get_or_init(|| {
        let kind = blobs();
        let cfg = TrainConfig {
            steps: IMAGE_STEPS,
            batch: 128,
            lr: 2e-3,
            lr_final: 5e-5,
            hidden: vec![IMAGE_HIDDEN, IMAGE_HIDDEN],
            schedule: OT,
        };
        train_flow_matching(IMAGE_SIDE * IMAGE_SIDE, &cfg, &mut Rng::new(1), |r| {
            kind.sample(r).expect("valid dataset").into_data()
        })
        .expect("training")
        .field
    })
}

fn mean_psnr(spec: &OperatorSpec, variant: SolverVariant) -> Result<f64, String> {
    let field = image_prior();
    let data = synthesize_dataset(&blobs(), IMAGE_COUNT, &Rng::new(999)).map_err(|e| e.to_string())?;
    let a = make_operator(spec, &[IMAGE_SIDE, IMAGE_SIDE]).map_err(|e| e.to_string())?;
    let meas = MeasurementModel::new(a.clone(), IMAGE_SIGMA).map_err(|e| e.to_string())?;
    let cfg = SolverConfig {
        variant,
        n_steps: 100,
        inner_iters: 10,
        step_size: 1e-2,
        guidance_weight: 1e3,
        sigma_y: IMAGE_SIGMA,
        trace: TraceEstimator::Auto { exact_threshold: 64, probes: 4 },
        ..Default::default()
    };
    let scores = flowmap::par::map_range(data.len(), |i| -> Result<f64, String> {
        let r = Rng::new(5).substream(i as u64);
        let y = meas.measure(&data[i], &mut r.fork("measure")).map_err(|e| e.to_string())?;
        let res = solve(&cfg, field, OT, a.as_ref(), &y, &r.fork("solve")).map_err(|e| e.to_string())?;
        psnr(&res.x1, &data[i], 1.0).map_err(|e| e.to_string())
    });
    Ok(mean(&scores.into_iter().collect::<Result<Vec<_>, _>>()?))
}

fn c09_ablation() -> Check {
    let spec = OperatorSpec::MaskRandom { fraction: 0.5, seed: 3 };
    let with = mean_psnr(&spec, SolverVariant::Ictm)?;
    let without = mean_psnr(&spec, SolverVariant::IctmNoPrior)?;
    ensure(with > without, format!("PSNR ICTM {with:.2} dB vs no prior {without:.2} dB ({IMAGE_COUNT} images)"))
}

fn c10_cs_ordering() -> Check {
    let half = mean_psnr(&OperatorSpec::DftSubsampled { rate: 0.5, seed: 3, sign_seed: 4 }, SolverVariant::Ictm)?;
    let quarter = mean_psnr(&OperatorSpec::DftSubsampled { rate: 0.25, seed: 3, sign_seed: 4 }, SolverVariant::Ictm)?;
    ensure(half > quarter, format!("PSNR rate 1/2 {half:.2} dB vs rate 1/4 {quarter:.2} dB"))
}

fn c12_metrics() -> Check {
    let mut rng = Rng::new(120);
    let img = Tensor::new(vec![16, 16], (0..256).map(|_| rng.uniform()).collect()).map_err(|e| e.to_string())?;
    let rgb = Tensor::new(vec![3, 16, 16], (0..768).map(|_| rng.uniform()).collect()).map_err(|e| e.to_string())?;
    let s_gray = ssim(&img, &img).map_err(|e| e.to_string())?;
    let s_rgb = ssim(&rgb, &rgb).map_err(|e| e.to_string())?;
    let p = psnr_from_mse(0.01, 1.0);

    let specs = [
        OperatorSpec::Identity,
        OperatorSpec::MaskRandom { fraction: 0.5, seed: 1 },
        OperatorSpec::MaskBox { rect: None },
        OperatorSpec::DownsampleAvg { factor: 2 },
        OperatorSpec::BlurGaussian { kernel_size: 5, sigma: 1.0 },
        OperatorSpec::DftSubsampled { rate: 0.5, seed: 2, sign_seed: 3 },
    ];
    let mut worst = 0.0f64;
    for spec in &specs {
        for shape in [vec![16, 16], vec![3, 8, 8]] {
            let a = make_operator(spec, &shape).map_err(|e| e.to_string())?;
            for _ in 0..5 {
                let x = rng.normal_vec(a.in_len());
                let g = rng.normal_vec(a.out_len());
                let lhs = dot(&a.forward(&x), &g);
                let rhs = dot(&x, &a.transpose(&g));
                worst = worst.max((lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(1.0));
            }
        }
    }
    ensure(
        s_gray == 1.0 && s_rgb == 1.0 && p == 20.0 && worst <= 1e-10,
        format!("ssim(x,x) {s_gray}/{s_rgb}, psnr(0.01) {p} dB, adjoint err {worst:.1e} over {} operators", specs.len()),
    )
}

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Duration,
    run: fn() -> Check,
}

fn main() {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let secs = Duration::from_secs;
    let criteria = [
        Criterion { id: 1, name: "score round-trip", budget: secs(1), run: c01_score_round_trip },
        Criterion { id: 2, name: "toy MAP agreement", budget: secs(120), run: c02_toy_map },
        Criterion { id: 3, name: "decomposition convergence", budget: secs(30), run: c03_decomposition },
        Criterion { id: 4, name: "auxiliary path law", budget: secs(10), run: c04_auxiliary_law },
        Criterion { id: 5, name: "global MAP chain", budget: secs(300), run: c05_global_map_chain },
        Criterion { id: 6, name: "differentiation", budget: secs(30), run: c06_differentiation },
        Criterion { id: 7, name: "trace estimation", budget: secs(10), run: c07_trace },
        Criterion { id: 8, name: "compliance bound", budget: secs(120), run: c08_compliance },
        Criterion { id: 9, name: "prior ablation", budget: secs(600), run: c09_ablation },
        Criterion { id: 10, name: "compressed sensing order", budget: secs(600), run: c10_cs_ordering },
        Criterion { id: 11, name: "training sanity", budget: secs(300), run: c11_training },
        Criterion { id: 12, name: "metrics and adjoints", budget: secs(10), run: c12_metrics },
    ];
    let mut failed = 0;
    let mut ran = 0;
    for c in &criteria {
        if !filters.is_empty() && !filters.iter().any(|f| c.name.contains(f.as_str()) || c.id.to_string() == *f) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let outcome = (c.run)();
        let elapsed = start.elapsed();
        let in_time = elapsed <= c.budget;
        let (ok, detail) = match outcome {
            Ok(d) => (in_time, d),
            Err(d) => (false, d),
        };
        if !ok {
            failed += 1;
        }
        println!(
            "[{}] {:02} {:<26} {:<72} ({:.2}s / {}s{})",
            if ok { "PASS" } else { "FAIL" },
            c.id,
            c.name,
            detail,
            elapsed.as_secs_f64(),
            c.budget.as_secs(),
            if in_time { "" } else { ", over budget" }
        );
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
