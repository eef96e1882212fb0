use std::fs;
use std::io::{self, Write};
use std::path::Path;
use std::process::ExitCode;

use serde::Serialize;
use tvo::autodiff::{ParamVector, RealArray};
use tvo::estimators::{gradient_std_diagnostic, sample_log_weights, write_grad_std_csv, EstimatorKind, GradStdRow, WeightTable};
use tvo::models::{ConjugateGaussian, LatentModel, ToyBernoulli};
use tvo::objectives::{iwae_estimate, training_gradient};
use tvo::oracles::{density_gradient_check, enumerate, exact_covariance_check, ti_identity_check};
use tvo::path::integrand_curve;
use tvo::rng;
use tvo::trainer::{
    self, load_trained, phase_specs, prepare, select_rows, write_jsonl, write_metrics_csv, write_sweep_csv, Generator,
    RunConfig, Setup, SweepAxes,
};
use tvo::{Result, TvoError};

use crate::{CheckGradientArgs, Command, CurveArgs, EvalArgs, Format, GradStdArgs, IdentityArgs, SweepArgs};

/// Residual below which the identity check passes.
const IDENTITY_TOLERANCE: f64 = 1e-5;

pub fn exit_code(e: &TvoError) -> u8 {
    match e {
        TvoError::Io(_) | TvoError::Format { .. } | TvoError::Csv(_) => 3,
        TvoError::Numerical(_) | TvoError::DegenerateWeights(_) => 1,
        _ => 2,
    }
}

pub fn run(cmd: Command) -> Result<ExitCode> {
    match cmd {
        Command::Train(a) => {
            let cfg = a.run.config(a.estimator.as_deref())?;
            pooled(cfg.single_thread, || train(&cfg, a.run.format))
        }
        Command::Sweep(a) => {
            let cfg = a.run.config(a.estimator.as_deref())?;
            pooled(cfg.single_thread, || sweep(&cfg, &a))
        }
        Command::Eval(a) => {
            let cfg = a.run.config(None)?;
            pooled(cfg.single_thread, || eval(&cfg, &a))
        }
        Command::CheckIdentity(a) => pooled(a.single_thread, || check_identity(&a)),
        Command::CheckGradients(a) => pooled(a.single_thread, || check_gradients(&a)),
        Command::DiagnoseGradStd(a) => {
            let cfg = a.run.config(None)?;
            pooled(cfg.single_thread, || diagnose_grad_std(&cfg, &a))
        }
        Command::ExportCurve(a) => {
            let cfg = a.run.config(None)?;
            pooled(cfg.single_thread, || export_curve(&cfg, &a))
        }
    }
}

fn pooled(single_thread: bool, f: impl FnOnce() -> Result<ExitCode> + Send) -> Result<ExitCode> {
    if !single_thread {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .map_err(|e| TvoError::Usage(format!("cannot start worker pool: {e}")))?;
    pool.install(f)
}

fn parse_list<T: std::str::FromStr>(flag: &str, text: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|v| v.trim().parse().map_err(|_| TvoError::Config(format!("invalid value `{v}` in --{flag}"))))
        .collect()
}

/// Writes `name.csv` (or `.jsonl`) under `out`, or to stdout without `out`.
fn emit<T: Serialize>(
    rows: &[T],
    format: Format,
    out: Option<&Path>,
    name: &str,
    csv: impl FnOnce(&[T], &mut dyn Write) -> Result<()>,
) -> Result<()> {
    let mut sink: Box<dyn Write> = match out {
        Some(dir) => {
            let ext = if format == Format::Jsonl { "jsonl" } else { "csv" };
            Box::new(fs::File::create(trainer::output_path(dir, &format!("{name}.{ext}"))?)?)
        }
        None => Box::new(io::stdout().lock()),
    };
    match format {
        Format::Csv => csv(rows, &mut sink)?,
        Format::Jsonl => write_jsonl(rows, &mut sink)?,
    }
    sink.flush()?;
    Ok(())
}

fn serde_csv<T: Serialize>(rows: &[T], w: &mut dyn Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

fn train(cfg: &RunConfig, format: Format) -> Result<ExitCode> {
    let outcome = trainer::train(cfg)?;
    match &cfg.out {
        Some(dir) => {
            fs::write(dir.join("config.txt"), cfg.to_text())?;
            if format == Format::Jsonl {
                write_jsonl(&outcome.metrics, fs::File::create(dir.join("metrics.jsonl"))?)?;
                if let Some(phi) = &outcome.phi_metrics {
                    write_jsonl(phi, fs::File::create(dir.join("metrics_phi.jsonl"))?)?;
                }
            }
        }
        None => emit(&outcome.metrics, format, None, "metrics", |r, w| write_metrics_csv(r, w))?,
    }
    if let Some(last) = outcome.metrics.last() {
        eprintln!(
            "iteration {}: objective {:.4}, test log-evidence {:.4}, KL gap {:.4}",
            last.iteration, last.objective, last.test_log_evidence, last.kl_gap
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(cfg: &RunConfig, a: &SweepArgs) -> Result<ExitCode> {
    let axes = SweepAxes {
        beta1: a.beta1_axis.as_deref().map_or(Ok(vec![cfg.beta1]), |t| parse_list("beta1-axis", t))?,
        partitions: a.k_axis.as_deref().map_or(Ok(vec![cfg.partitions]), |t| parse_list("K-axis", t))?,
        samples: a.s_axis.as_deref().map_or(Ok(vec![cfg.samples]), |t| parse_list("S-axis", t))?,
        replicates: a.replicates,
    };
    let rows = trainer::sweep(cfg, &axes)?;
    match (&cfg.out, a.run.format) {
        (Some(dir), Format::Jsonl) => write_jsonl(&rows, fs::File::create(dir.join("sweep.jsonl"))?)?,
        (Some(_), Format::Csv) => {}
        (None, format) => emit(&rows, format, None, "sweep", |r, w| write_sweep_csv(r, w))?,
    }
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        eprintln!("{failed} of {} cells failed", rows.len());
    }
    Ok(ExitCode::SUCCESS)
}

/// Parameters to inspect: a checkpoint, the generator of a synthetic
/// target, or a fresh initialization; optionally with `q` set to the exact posterior.
fn resolve_params(cfg: &RunConfig, checkpoint: Option<&Path>, posterior_q: bool) -> Result<(Setup, ParamVector)> {
    let (setup, params) = match checkpoint {
        Some(path) => load_trained(cfg, path)?,
        None => {
            let setup = prepare(cfg)?;
            let params = match &setup.generator {
                Some(Generator::Toy(_, p)) | Some(Generator::Gaussian(_, p)) => p.clone(),
                None => setup.model.init_params(cfg.seed),
            };
            (setup, params)
        }
    };
    if !posterior_q {
        return Ok((setup, params));
    }
    let params = match &setup.generator {
        Some(Generator::Toy(m, _)) => m.posterior_matched(&params)?,
        Some(Generator::Gaussian(m, _)) => m.posterior_matched(&params),
        None => return Err(TvoError::Config("--posterior-q needs the toy or gaussian model".into())),
    };
    Ok((setup, params))
}

#[derive(Serialize)]
struct EvalRow {
    items: usize,
    #[serde(rename = "S")]
    samples: usize,
    log_evidence: f64,
    elbo: f64,
    eubo: f64,
    min_ess: f64,
    exact_log_evidence: Option<f64>,
}

fn exact_log_evidence(setup: &Setup, params: &ParamVector, x: &RealArray) -> Result<Option<f64>> {
    let n = x.rows() as f64;
    Ok(match &setup.generator {
        Some(Generator::Toy(m, _)) => {
            let mut total = 0.0;
            for i in 0..x.rows() {
                total += enumerate(m, params, x.row(i))?.log_evidence;
            }
            Some(total / n)
        }
        Some(Generator::Gaussian(m, _)) => Some((0..x.rows()).map(|i| m.analytic_log_evidence(params, x.row(i)[0])).sum::<f64>() / n),
        None => None,
    })
}

fn eval(cfg: &RunConfig, a: &EvalArgs) -> Result<ExitCode> {
    let (setup, params) = resolve_params(cfg, a.checkpoint.as_deref(), a.posterior_q)?;
    let model = setup.model.as_ref();
    let x = setup.eval_set(cfg.eval_items);
    // same draws as export-curve with the same seed
    let curve = integrand_curve(model, &params, &x, &[0.0, 1.0], cfg.samples, &mut rng::rng(cfg.seed))?;
    let log_w = sample_log_weights(model, &params, &x, cfg.samples, &mut rng::rng(cfg.seed))?;
    let mut log_ev = 0.0;
    let mut min_ess = f64::INFINITY;
    for row in log_w.chunks(cfg.samples) {
        log_ev += iwae_estimate(row)? / x.rows() as f64;
        min_ess = min_ess.min(WeightTable::new(row.to_vec(), vec![1.0])?.effective_sample_size(0));
    }
    let row = EvalRow {
        items: x.rows(),
        samples: cfg.samples,
        log_evidence: log_ev,
        elbo: curve.values[0],
        eubo: curve.values[1],
        min_ess,
        exact_log_evidence: exact_log_evidence(&setup, &params, &x)?,
    };
    emit(&[row], a.run.format, cfg.out.as_deref(), "eval", serde_csv)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct IdentityRow {
    model: String,
    seed: u64,
    grid: usize,
    log_evidence: f64,
    residual: f64,
    pass: bool,
}

fn check_identity(a: &IdentityArgs) -> Result<ExitCode> {
    let mut rows = Vec::new();
    for seed in a.seed..a.seed + a.instances {
        let (log_evidence, residual) = match a.model.as_str() {
            "toy" => {
                let m = ToyBernoulli::new(a.toy_latents, a.toy_data_dim)?;
                let mut p = m.random_params(2.0, seed);
                let (x, _) = m.sample_joint(&p, 1, &mut rng::rng(seed))?;
                if a.posterior_q {
                    p = m.posterior_matched(&p)?;
                }
                let e = enumerate(&m, &p, x.row(0))?;
                let mut failure = None;
                let residual = ti_identity_check(
                    |b| {
                        e.g(b).unwrap_or_else(|err| {
                            failure.get_or_insert(err);
                            f64::NAN
                        })
                    },
                    e.log_evidence,
                    a.grid,
                )?;
                if let Some(err) = failure {
                    return Err(err);
                }
                (e.log_evidence, residual)
            }
            "gaussian" => {
                let (m, mut p, x) = ConjugateGaussian::random_instance(seed);
                if a.posterior_q {
                    p = m.posterior_matched(&p);
                }
                let log_ev = m.analytic_log_evidence(&p, x);
                (log_ev, ti_identity_check(|b| m.analytic_g(&p, x, b), log_ev, a.grid)?)
            }
            other => return Err(TvoError::Config(format!("check-identity needs toy or gaussian, got `{other}`"))),
        };
        rows.push(IdentityRow {
            model: a.model.clone(),
            seed,
            grid: a.grid,
            log_evidence,
            residual,
            pass: residual < IDENTITY_TOLERANCE,
        });
    }
    emit(&rows, a.format, None, "identity", serde_csv)?;
    let failed = rows.iter().any(|r| !r.pass);
    Ok(if failed && !a.report_only { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

#[derive(Serialize)]
struct GradientCheckRow {
    check: &'static str,
    model: String,
    seed: u64,
    beta: Option<f64>,
    relative_error: f64,
    pass: bool,
}

fn check_gradients(a: &CheckGradientArgs) -> Result<ExitCode> {
    let mut cfg = RunConfig { limit: Some(16), test_items: 4, ..RunConfig::default() };
    cfg.set("model", &a.model)?;
    let setup = prepare(&cfg)?;
    let model = setup.model.as_ref();
    let betas: Vec<f64> = parse_list("betas", &a.betas)?;
    let mut rows = Vec::new();
    for seed in a.seed..a.seed + a.instances {
        let params = match &setup.generator {
            Some(Generator::Toy(m, _)) => m.random_params(1.5, seed),
            _ => model.init_params(seed),
        };
        let x = select_rows(&setup.data.train, &[0, 1, 2]);
        let z = model.sample_q(&params, &x, &mut rng::rng(seed))?;
        let err = density_gradient_check(model, &params, &x, &z, 1e-5)?;
        rows.push(GradientCheckRow {
            check: "tape",
            model: a.model.clone(),
            seed,
            beta: None,
            relative_error: err,
            pass: err <= a.tolerance,
        });
        if let Some(Generator::Toy(m, _)) = &setup.generator {
            for &beta in &betas {
                let err = exact_covariance_check(m, &params, x.row(0), beta, 1e-5)?;
                rows.push(GradientCheckRow {
                    check: "covariance",
                    model: a.model.clone(),
                    seed,
                    beta: Some(beta),
                    relative_error: err,
                    pass: err <= a.tolerance,
                });
            }
        }
    }
    emit(&rows, a.format, None, "gradients", serde_csv)?;
    Ok(if rows.iter().all(|r| r.pass) { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn diagnose_grad_std(cfg: &RunConfig, a: &GradStdArgs) -> Result<ExitCode> {
    let estimators: Vec<EstimatorKind> = parse_list("estimator", &a.estimator)?;
    let samples: Vec<usize> = a.s_axis.as_deref().map_or(Ok(vec![cfg.samples]), |t| parse_list("S-axis", t))?;
    // with --iters on the command line, train first and diagnose the result
    let trained = a.run.iters.is_some() && a.checkpoint.is_none();
    let (setup, params, iteration) = if trained {
        let run = RunConfig { out: None, eval_interval: cfg.iters.max(1), ..cfg.clone() };
        let outcome = trainer::train(&run)?;
        (outcome.setup, outcome.params, cfg.iters)
    } else {
        let (setup, params) = resolve_params(cfg, a.checkpoint.as_deref(), a.posterior_q)?;
        (setup, params, 0)
    };
    let model = setup.model.as_ref();
    let n = setup.data.train.rows();
    let x = select_rows(&setup.data.train, &(0..cfg.batch).map(|i| i % n).collect::<Vec<_>>());
    let mut rows = Vec::new();
    for &kind in &estimators {
        for &s in &samples {
            let cell = RunConfig { estimator: kind, samples: s, ..cfg.clone() };
            let spec = phase_specs(&cell)?.remove(0);
            spec.validate(model)?;
            let avg_std = gradient_std_diagnostic(a.reps, rng::derive_seed(cfg.seed, 0), |seed| {
                Ok(training_gradient(&spec, model, &params, &x, seed)?.vector)
            })?;
            rows.push(GradStdRow {
                estimator: kind.to_string(),
                samples: s,
                partitions: cfg.partitions,
                beta1: cfg.beta1,
                iteration,
                avg_std,
            });
        }
    }
    emit(&rows, a.run.format, cfg.out.as_deref(), "grad_std", |r, w| write_grad_std_csv(r, w))?;
    Ok(ExitCode::SUCCESS)
}

fn export_curve(cfg: &RunConfig, a: &CurveArgs) -> Result<ExitCode> {
    let grid: Vec<f64> = match &a.betas {
        Some(t) => parse_list("betas", t)?,
        None if a.grid >= 2 => (0..a.grid).map(|i| i as f64 / (a.grid - 1) as f64).collect(),
        None => return Err(TvoError::Config("--grid needs at least two knots".into())),
    };
    let (setup, params) = resolve_params(cfg, a.checkpoint.as_deref(), a.posterior_q)?;
    let x = setup.eval_set(cfg.eval_items);
    let curve = integrand_curve(setup.model.as_ref(), &params, &x, &grid, cfg.samples, &mut rng::rng(cfg.seed))?;
    match (a.run.format, cfg.out.as_deref()) {
        (Format::Csv, Some(dir)) => curve.write_csv(fs::File::create(trainer::output_path(dir, "curve.csv")?)?)?,
        (Format::Jsonl, Some(dir)) => curve.write_jsonl(fs::File::create(trainer::output_path(dir, "curve.jsonl")?)?)?,
        (Format::Csv, None) => curve.write_csv(io::stdout().lock())?,
        (Format::Jsonl, None) => curve.write_jsonl(io::stdout().lock())?,
    }
    if let Some(b) = curve.beta_star() {
        eprintln!("maximum curvature near beta = {b}");
    }
    Ok(ExitCode::SUCCESS)
}
