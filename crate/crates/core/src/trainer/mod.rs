//! Optimization loop, datasets, sweeps and metric persistence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng as _;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{ParamVector, RealArray, Role};
use crate::error::{Result, TvoError};
use crate::estimators::{gradient_std_diagnostic, sample_log_weights};
use crate::models::checkpoint::Checkpoint;
use crate::models::{ConjugateGaussian, GaussianVae, LatentModel, SbnConfig, SigmoidBeliefNet, ToyBernoulli, VaeConfig};
use crate::objectives::{iwae_estimate, training_gradient, DataSource, Direction, ObjectiveKind, ObjectiveSpec, Optimize};
use crate::path::make_schedule;
use crate::rng;

mod adam;
mod config;
pub mod data;

pub use adam::{adam_step, AdamState, DEFAULT_LR};
pub use config::{ModelKind, RunConfig, TrainMode, DESK_MAX_ITERS, DESK_MAX_LATENT, DESK_MAX_SAMPLES};
pub use data::{desk_dataset, desk_digits, load_mnist, select_rows, Dataset};

/// One evaluation point of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub iteration: usize,
    /// Batch estimate of the training objective at this iteration.
    pub objective: f64,
    /// Mean IWAE log-evidence over the evaluation items.
    pub test_log_evidence: f64,
    /// `test_log_evidence − ELBO`, both from the same evaluation draws.
    pub kl_gap: f64,
    pub grad_std: Option<f64>,
    /// Elapsed time since the start of the run; `None` in single-thread mode
    /// so that repeated runs produce identical output.
    pub wallclock_ms: Option<f64>,
}

pub const METRICS_HEADER: [&str; 6] = ["iteration", "objective", "test_log_evidence", "kl_gap", "grad_std", "wallclock_ms"];

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "null".to_string(), |v| v.to_string())
}

pub fn write_metrics_csv(rows: &[MetricsRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(METRICS_HEADER)?;
    for r in rows {
        out.write_record([
            r.iteration.to_string(),
            r.objective.to_string(),
            r.test_log_evidence.to_string(),
            r.kl_gap.to_string(),
            fmt_opt(r.grad_std),
            fmt_opt(r.wallclock_ms),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// One JSON object per line.
pub fn write_jsonl<T: Serialize>(rows: &[T], mut w: impl Write) -> Result<()> {
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(|e| TvoError::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// A frozen data-generating model for the exactly solvable targets.
#[derive(Clone, Debug)]
pub enum Generator {
    Toy(ToyBernoulli, ParamVector),
    Gaussian(ConjugateGaussian, ParamVector),
}

/// Model, data and (for synthetic targets) the generator of a run.
pub struct Setup {
    pub model: Box<dyn LatentModel>,
    pub data: Dataset,
    pub generator: Option<Generator>,
}

impl Setup {
    pub fn eval_set(&self, items: usize) -> RealArray {
        let n = items.min(self.data.test.rows());
        select_rows(&self.data.test, &(0..n).collect::<Vec<_>>())
    }

    /// Parameters to checkpoint alongside the model.
    fn extras(&self) -> Vec<(&'static str, Vec<f64>)> {
        match self.model.name() {
            "sbn" => vec![("data/mean", data_mean(&self.data.train))],
            _ => Vec::new(),
        }
    }
}

fn data_mean(x: &RealArray) -> Vec<f64> {
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= x.rows() as f64);
    mean
}

/// Toy generator: logits drawn at scale 2 from `generator_seed`.
pub fn toy_generator(cfg: &RunConfig) -> Result<(ToyBernoulli, ParamVector)> {
    let model = ToyBernoulli::new(cfg.toy_latents, cfg.toy_data_dim)?;
    let params = model.random_params(2.0, cfg.generator_seed);
    Ok((model, params))
}

pub fn gaussian_generator() -> (ConjugateGaussian, ParamVector) {
    let model = ConjugateGaussian::new(1.0, 1.0).expect("positive");
    let params = model.params(1.0, 0.0, 0.0, 0.0);
    (model, params)
}

/// Builds the model and dataset a configuration describes.
pub fn prepare(cfg: &RunConfig) -> Result<Setup> {
    cfg.validate()?;
    let train_items = cfg.limit.unwrap_or(1_000);
    let sample_data = |model: &dyn LatentModel, params: &ParamVector| -> Result<Dataset> {
        let mut r = rng::stream(cfg.generator_seed, 1);
        let train = model.sample_joint(params, train_items, &mut r)?.0;
        let mut r = rng::stream(cfg.generator_seed, 2);
        let test = model.sample_joint(params, cfg.test_items, &mut r)?.0;
        Ok(Dataset { train, valid: None, test })
    };
    let (model, data, generator): (Box<dyn LatentModel>, Dataset, Option<Generator>) = match cfg.model {
        ModelKind::Toy => {
            let (gen, gp) = toy_generator(cfg)?;
            let data = sample_data(&gen, &gp)?;
            (Box::new(gen.clone()), data, Some(Generator::Toy(gen, gp)))
        }
        ModelKind::Gaussian => {
            let (gen, gp) = gaussian_generator();
            let data = sample_data(&gen, &gp)?;
            (Box::new(gen.clone()), data, Some(Generator::Gaussian(gen, gp)))
        }
        ModelKind::Sbn | ModelKind::Vae => {
            let mut data = match &cfg.data_dir {
                Some(dir) => load_mnist(dir, cfg.threshold, cfg.limit)?,
                None => desk_dataset(train_items, cfg.test_items, cfg.generator_seed),
            };
            if data.test.rows() > cfg.test_items {
                data.test = select_rows(&data.test, &(0..cfg.test_items).collect::<Vec<_>>());
            }
            let model: Box<dyn LatentModel> = if cfg.model == ModelKind::Sbn {
                let sbn = SigmoidBeliefNet::new(SbnConfig {
                    data_dim: data.data_dim(),
                    latent_dim: cfg.latent_dim,
                    layers: cfg.layers,
                    nonlinear: cfg.nonlinear,
                })?
                .with_training_data(&data.train)?;
                Box::new(sbn)
            } else {
                Box::new(GaussianVae::new(VaeConfig {
                    data_dim: data.data_dim(),
                    latent_dim: cfg.latent_dim,
                    hidden: cfg.hidden,
                })?)
            };
            (model, data, None)
        }
    };
    Ok(Setup { model, data, generator })
}

/// Mean IWAE log-evidence and mean ELBO over the rows of `x`, each from
/// `samples` draws; row `i` uses stream `(seed, i)`.
pub fn evaluate(model: &dyn LatentModel, params: &ParamVector, x: &RealArray, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let per_item: Vec<(f64, f64)> = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let xi = select_rows(x, &[i]);
            let mut r = rng::stream(seed, i as u64);
            let lw = sample_log_weights(model, params, &xi, samples, &mut r)?;
            Ok((iwae_estimate(&lw)?, lw.iter().sum::<f64>() / lw.len() as f64))
        })
        .collect::<Result<_>>()?;
    let n = per_item.len() as f64;
    Ok((per_item.iter().map(|p| p.0).sum::<f64>() / n, per_item.iter().map(|p| p.1).sum::<f64>() / n))
}

/// The objective specs one iteration applies, in order.
pub fn phase_specs(cfg: &RunConfig) -> Result<Vec<ObjectiveSpec>> {
    let schedule = make_schedule(cfg.partitions, cfg.beta1, cfg.spacing).map_err(|e| TvoError::config(e.to_string()))?;
    let base = ObjectiveSpec::new(cfg.objective, schedule.clone(), cfg.samples).estimator(cfg.estimator).crn(cfg.crn);
    Ok(match cfg.mode {
        TrainMode::Joint => vec![base.optimize(cfg.optimize)],
        TrainMode::WakeSleep { phi_on_real_data } => {
            let source = if phi_on_real_data { DataSource::Real } else { DataSource::ModelSimulated };
            let phi = ObjectiveSpec::new(ObjectiveKind::TvoUpper, schedule, cfg.samples)
                .estimator(cfg.estimator)
                .crn(cfg.crn)
                .optimize(Optimize::Phi)
                .data_source(source);
            vec![base.optimize(Optimize::Theta), phi]
        }
    })
}

/// Result of a training run.
pub struct TrainOutcome {
    /// Metrics of the first (or only) phase.
    pub metrics: Vec<MetricsRow>,
    /// Metrics of the φ phase in wake-sleep mode.
    pub phi_metrics: Option<Vec<MetricsRow>>,
    pub params: ParamVector,
    pub setup: Setup,
    pub skipped_steps: u64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const PHI_METRICS_FILE: &str = "metrics_phi.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.tvom";

fn write_outputs(out: &Path, outcome_metrics: &[MetricsRow], phi: Option<&[MetricsRow]>, ck: &Checkpoint) -> Result<()> {
    fs::create_dir_all(out)?;
    write_metrics_csv(outcome_metrics, fs::File::create(out.join(METRICS_FILE))?)?;
    if let Some(phi) = phi {
        write_metrics_csv(phi, fs::File::create(out.join(PHI_METRICS_FILE))?)?;
    }
    ck.save(&out.join(CHECKPOINT_FILE))
}

/// Runs `cfg.iters` iterations of gradient estimation and Adam, evaluating at
/// iteration 0, every `eval_interval` iterations and at the end. With
/// `cfg.out` set, writes the metrics CSV(s) and a checkpoint there.
///
/// A non-finite objective aborts the run; the outputs then hold the metrics
/// so far and the last parameters with a finite objective.
pub fn train(cfg: &RunConfig) -> Result<TrainOutcome> {
    let setup = prepare(cfg)?;
    let model = setup.model.as_ref();
    let specs = phase_specs(cfg)?;
    for s in &specs {
        s.validate(model)?;
    }
    let start = Instant::now();
    let elapsed = || (!cfg.single_thread).then(|| start.elapsed().as_secs_f64() * 1e3);
    let mut params = model.init_params(cfg.seed);
    let mut adam = AdamState::new(params.dim(), cfg.lr);
    let masks: Vec<Vec<f64>> = specs
        .iter()
        .map(|s| {
            let roles: &[Role] = match s.optimize {
                Optimize::Theta => &[Role::Theta],
                Optimize::Phi => &[Role::Phi],
                Optimize::Both => &[Role::Theta, Role::Phi],
            };
            params.layout().role_mask(roles)
        })
        .collect();
    let eval_x = setup.eval_set(cfg.eval_items);
    let n_train = setup.data.train.rows();
    let fixed_batch = select_rows(&setup.data.train, &(0..cfg.batch.min(n_train)).collect::<Vec<_>>());
    let mut batch_rng = rng::stream(cfg.seed, 7);
    let mut rows: Vec<Vec<MetricsRow>> = vec![Vec::new(); specs.len()];
    let mut last_objective = vec![f64::NAN; specs.len()];
    let extras = setup.extras();
    let checkpoint = |p: &ParamVector| {
        let ex: Vec<(&str, &[f64])> = extras.iter().map(|(n, v)| (*n, v.as_slice())).collect();
        Checkpoint::from_params(p, &ex)
    };

    let record = |it: usize, params: &ParamVector, objectives: &[f64], rows: &mut Vec<Vec<MetricsRow>>| -> Result<()> {
        let (log_ev, elbo) = evaluate(model, params, &eval_x, cfg.eval_samples, rng::derive_seed(cfg.seed, 1 << 40))?;
        for (p, spec) in specs.iter().enumerate() {
            let grad_std = if cfg.grad_std_reps >= 2 {
                Some(gradient_std_diagnostic(cfg.grad_std_reps, rng::derive_seed(cfg.seed, it as u64), |s| {
                    Ok(training_gradient(spec, model, params, &fixed_batch, s)?.vector)
                })?)
            } else {
                None
            };
            rows[p].push(MetricsRow {
                iteration: it,
                objective: objectives[p],
                test_log_evidence: log_ev,
                kl_gap: log_ev - elbo,
                grad_std,
                wallclock_ms: elapsed(),
            });
        }
        Ok(())
    };

    // iteration-0 objective from a first batch estimate
    let x0 = select_rows(&setup.data.train, &(0..cfg.batch).map(|i| i % n_train).collect::<Vec<_>>());
    let initial: Vec<f64> = specs
        .iter()
        .map(|s| training_gradient(s, model, &params, &x0, rng::derive_seed(cfg.seed, u64::MAX)).map(|e| e.objective))
        .collect::<Result<_>>()?;
    record(0, &params, &initial, &mut rows)?;

    let mut skipped = 0;
    for it in 1..=cfg.iters {
        let idx: Vec<usize> = (0..cfg.batch).map(|_| batch_rng.random_range(0..n_train)).collect();
        let x = select_rows(&setup.data.train, &idx);
        for (p, spec) in specs.iter().enumerate() {
            let seed = rng::derive_seed(rng::derive_seed(cfg.seed, p as u64 + 100), it as u64);
            let est = training_gradient(spec, model, &params, &x, seed)?;
            if !est.objective.is_finite() {
                if let Some(out) = &cfg.out {
                    let phi = (rows.len() > 1).then(|| rows[1].as_slice());
                    write_outputs(out, &rows[0], phi, &checkpoint(&params))?;
                }
                return Err(TvoError::Numerical(format!(
                    "objective became {} at iteration {it}; run aborted",
                    est.objective
                )));
            }
            last_objective[p] = est.objective;
            let maximize = spec.direction == Direction::Maximize;
            if !adam.step(&mut params, &est.vector, maximize, Some(&masks[p]))? {
                skipped += 1;
                eprintln!("warning: non-finite gradient at iteration {it}; step skipped");
            }
        }
        if it % cfg.eval_interval == 0 || it == cfg.iters {
            record(it, &params, &last_objective, &mut rows)?;
        }
    }

    let mut rows = rows.into_iter();
    let metrics = rows.next().unwrap_or_default();
    let phi_metrics = rows.next();
    if let Some(out) = &cfg.out {
        write_outputs(out, &metrics, phi_metrics.as_deref(), &checkpoint(&params))?;
    }
    Ok(TrainOutcome { metrics, phi_metrics, params, setup, skipped_steps: skipped })
}

/// Model and parameters from a configuration plus a checkpoint file.
pub fn load_trained(cfg: &RunConfig, path: &Path) -> Result<(Setup, ParamVector)> {
    let mut setup = prepare(cfg)?;
    let ck = Checkpoint::load(path)?;
    if let (Some(mean), ModelKind::Sbn) = (ck.get("data/mean"), cfg.model) {
        let mut sbn = SigmoidBeliefNet::new(SbnConfig {
            data_dim: setup.data.data_dim(),
            latent_dim: cfg.latent_dim,
            layers: cfg.layers,
            nonlinear: cfg.nonlinear,
        })?;
        sbn.set_data_mean(mean.to_vec())?;
        setup.model = Box::new(sbn);
    }
    let params = ck.params(setup.model.layout())?;
    Ok((setup, params))
}

/// Grid axes of a sweep; every combination is one independent run.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepAxes {
    pub beta1: Vec<f64>,
    pub partitions: Vec<usize>,
    pub samples: Vec<usize>,
    /// Independent repetitions of every grid point.
    pub replicates: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub cell: usize,
    pub beta1: f64,
    #[serde(rename = "K")]
    pub partitions: usize,
    #[serde(rename = "S")]
    pub samples: usize,
    pub seed: u64,
    pub status: String,
    pub iteration: Option<usize>,
    pub objective: Option<f64>,
    pub test_log_evidence: Option<f64>,
    pub kl_gap: Option<f64>,
}

/// The per-cell configurations of a sweep: cell `i` uses seed `template.seed + i`
/// and writes to `template.out/cell-i`.
pub fn sweep_cells(template: &RunConfig, axes: &SweepAxes) -> Result<Vec<RunConfig>> {
    if axes.beta1.is_empty() || axes.partitions.is_empty() || axes.samples.is_empty() || axes.replicates == 0 {
        return Err(TvoError::config("every sweep axis needs at least one value"));
    }
    let mut cells = Vec::new();
    for &beta1 in &axes.beta1 {
        for &k in &axes.partitions {
            for &s in &axes.samples {
                for _ in 0..axes.replicates {
                    let i = cells.len();
                    let mut cfg = template.clone();
                    cfg.beta1 = beta1;
                    cfg.partitions = k;
                    cfg.samples = s;
                    cfg.seed = template.seed + i as u64;
                    cfg.out = template.out.as_ref().map(|o| o.join(format!("cell-{i}")));
                    cells.push(cfg);
                }
            }
        }
    }
    Ok(cells)
}

/// Runs every cell (in parallel on the current pool); failures are recorded
/// in the cell's status and do not stop the sweep. With `template.out` set,
/// also writes `sweep.csv` there.
pub fn sweep(template: &RunConfig, axes: &SweepAxes) -> Result<Vec<SweepRow>> {
    let cells = sweep_cells(template, axes)?;
    let rows: Vec<SweepRow> = cells
        .par_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let mut row = SweepRow {
                cell: i,
                beta1: cfg.beta1,
                partitions: cfg.partitions,
                samples: cfg.samples,
                seed: cfg.seed,
                status: "ok".into(),
                iteration: None,
                objective: None,
                test_log_evidence: None,
                kl_gap: None,
            };
            match train(cfg) {
                Ok(out) => {
                    if let Some(last) = out.metrics.last() {
                        row.iteration = Some(last.iteration);
                        row.objective = Some(last.objective);
                        row.test_log_evidence = Some(last.test_log_evidence);
                        row.kl_gap = Some(last.kl_gap);
                    }
                }
                Err(e) => row.status = format!("error: {e}"),
            }
            row
        })
        .collect();
    if let Some(out) = &template.out {
        fs::create_dir_all(out)?;
        write_sweep_csv(&rows, fs::File::create(out.join("sweep.csv"))?)?;
    }
    Ok(rows)
}

pub fn write_sweep_csv(rows: &[SweepRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["cell", "beta1", "K", "S", "seed", "status", "iteration", "objective", "test_log_evidence", "kl_gap"])?;
    let opt = |v: Option<f64>| fmt_opt(v);
    for r in rows {
        out.write_record([
            r.cell.to_string(),
            r.beta1.to_string(),
            r.partitions.to_string(),
            r.samples.to_string(),
            r.seed.to_string(),
            r.status.clone(),
            r.iteration.map_or("null".into(), |i| i.to_string()),
            opt(r.objective),
            opt(r.test_log_evidence),
            opt(r.kl_gap),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Mean wall-clock milliseconds of one training iteration (gradient estimate
/// plus Adam step) over `iters` iterations after one warm-up iteration.
pub fn iteration_cost(cfg: &RunConfig, iters: usize) -> Result<f64> {
    let setup = prepare(cfg)?;
    let model = setup.model.as_ref();
    let specs = phase_specs(cfg)?;
    let mut params = model.init_params(cfg.seed);
    let mut adam = AdamState::new(params.dim(), cfg.lr);
    let n = setup.data.train.rows();
    let x = select_rows(&setup.data.train, &(0..cfg.batch).map(|i| i % n).collect::<Vec<_>>());
    let mut step = |it: usize, params: &mut ParamVector| -> Result<()> {
        for spec in &specs {
            let est = training_gradient(spec, model, params, &x, rng::derive_seed(cfg.seed, it as u64))?;
            adam.step(params, &est.vector, spec.direction == Direction::Maximize, None)?;
        }
        Ok(())
    };
    step(0, &mut params)?;
    let start = Instant::now();
    for it in 1..=iters {
        step(it, &mut params)?;
    }
    Ok(start.elapsed().as_secs_f64() * 1e3 / iters.max(1) as f64)
}

/// Output directory helper: `dir/name`, creating `dir`.
pub fn output_path(dir: &Path, name: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    Ok(dir.join(name))
}
