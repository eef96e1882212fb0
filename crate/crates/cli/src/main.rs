//! `tvo`: training, sweeps, diagnostics and oracle checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tvo::trainer::RunConfig;
use tvo::TvoError;

mod commands;

#[derive(Parser)]
#[command(name = "tvo", version, about = "Geometric-path evidence bounds: training, sweeps and checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write metrics and a checkpoint.
    Train(TrainArgs),
    /// Run a grid of independent training runs over beta1, K and S.
    Sweep(SweepArgs),
    /// Estimate log-evidence, ELBO and EUBO on the evaluation items.
    Eval(EvalArgs),
    /// Compare the quadrature of the exact integrand with the exact log-evidence.
    CheckIdentity(IdentityArgs),
    /// Compare tape and estimator gradients with finite differences.
    CheckGradients(CheckGradientArgs),
    /// Per-coordinate gradient standard deviation for estimators and sample counts.
    DiagnoseGradStd(GradStdArgs),
    /// Estimate the integrand on a beta grid.
    ExportCurve(CurveArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Jsonl,
}

/// Flags mirroring the run configuration keys.
#[derive(Args, Clone, Debug)]
pub struct RunFlags {
    /// sbn | vae | toy | gaussian
    #[arg(long)]
    model: Option<String>,
    /// elbo | eubo | tvo_lower | tvo_upper | iwae
    #[arg(long)]
    objective: Option<String>,
    /// theta | phi | both
    #[arg(long)]
    optimize: Option<String>,
    /// joint | wake-sleep | wake-wake
    #[arg(long)]
    mode: Option<String>,
    /// Samples per datum.
    #[arg(long = "S")]
    samples: Option<String>,
    /// Number of partitions.
    #[arg(long = "K")]
    partitions: Option<String>,
    #[arg(long)]
    beta1: Option<String>,
    /// log | equal
    #[arg(long)]
    spacing: Option<String>,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    batch: Option<String>,
    #[arg(long)]
    iters: Option<String>,
    #[arg(long)]
    eval_interval: Option<String>,
    #[arg(long)]
    eval_samples: Option<String>,
    #[arg(long)]
    eval_items: Option<String>,
    #[arg(long)]
    grad_std_reps: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// Keep the first N training items.
    #[arg(long)]
    limit: Option<String>,
    #[arg(long)]
    test_items: Option<String>,
    /// Directory holding the four MNIST IDX files; procedural digits otherwise.
    #[arg(long)]
    data_dir: Option<String>,
    #[arg(long)]
    threshold: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<String>,
    /// Common random numbers: on | off
    #[arg(long)]
    crn: Option<String>,
    #[arg(long)]
    latent_dim: Option<String>,
    #[arg(long)]
    layers: Option<String>,
    #[arg(long)]
    nonlinear: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    toy_latents: Option<String>,
    #[arg(long)]
    toy_data_dim: Option<String>,
    #[arg(long)]
    generator_seed: Option<String>,
    /// Lift the desk-scale caps.
    #[arg(long)]
    allow_large: bool,
    /// Run on one worker thread; output is then reproducible byte for byte.
    #[arg(long)]
    single_thread: bool,
    /// key = value file applied after the flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

impl RunFlags {
    fn pairs(&self) -> Vec<(&'static str, &str)> {
        let fields: [(&'static str, &Option<String>); 29] = [
            ("model", &self.model),
            ("objective", &self.objective),
            ("optimize", &self.optimize),
            ("mode", &self.mode),
            ("S", &self.samples),
            ("K", &self.partitions),
            ("beta1", &self.beta1),
            ("spacing", &self.spacing),
            ("lr", &self.lr),
            ("batch", &self.batch),
            ("iters", &self.iters),
            ("eval_interval", &self.eval_interval),
            ("eval_samples", &self.eval_samples),
            ("eval_items", &self.eval_items),
            ("grad_std_reps", &self.grad_std_reps),
            ("seed", &self.seed),
            ("limit", &self.limit),
            ("test_items", &self.test_items),
            ("data_dir", &self.data_dir),
            ("threshold", &self.threshold),
            ("out", &self.out),
            ("crn", &self.crn),
            ("latent_dim", &self.latent_dim),
            ("layers", &self.layers),
            ("nonlinear", &self.nonlinear),
            ("hidden", &self.hidden),
            ("toy_latents", &self.toy_latents),
            ("toy_data_dim", &self.toy_data_dim),
            ("generator_seed", &self.generator_seed),
        ];
        fields.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect()
    }

    /// Defaults, then flags, then the config file.
    pub fn config(&self, estimator: Option<&str>) -> Result<RunConfig, TvoError> {
        let mut cfg = RunConfig::default();
        for (k, v) in self.pairs() {
            cfg.set(k, v)?;
        }
        if let Some(e) = estimator {
            cfg.set("estimator", e)?;
        }
        cfg.allow_large |= self.allow_large;
        cfg.single_thread |= self.single_thread;
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.apply_text(&text)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    run: RunFlags,
    /// cov | reinforce | reinforce-baseline | reparam | exact
    #[arg(long)]
    estimator: Option<String>,
}

#[derive(Args)]
pub struct SweepArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    estimator: Option<String>,
    /// Comma-separated beta1 values (default: --beta1).
    #[arg(long)]
    beta1_axis: Option<String>,
    /// Comma-separated partition counts (default: --K).
    #[arg(long = "K-axis")]
    k_axis: Option<String>,
    /// Comma-separated sample counts (default: --S).
    #[arg(long = "S-axis")]
    s_axis: Option<String>,
    #[arg(long, default_value_t = 1)]
    replicates: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Checkpoint to evaluate; without it the generator (toy, gaussian) or
    /// freshly initialized parameters are used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Replace q by the exact posterior (toy and gaussian only).
    #[arg(long)]
    posterior_q: bool,
}

#[derive(Args)]
pub struct IdentityArgs {
    /// toy | gaussian
    #[arg(long, default_value = "toy")]
    model: String,
    /// Quadrature knots on [0, 1].
    #[arg(long, default_value_t = 10_000)]
    grid: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of consecutive seeded instances to check.
    #[arg(long, default_value_t = 1)]
    instances: u64,
    #[arg(long)]
    posterior_q: bool,
    /// Print the residual without failing above the tolerance.
    #[arg(long)]
    report_only: bool,
    #[arg(long, default_value_t = 3)]
    toy_latents: usize,
    #[arg(long, default_value_t = 6)]
    toy_data_dim: usize,
    #[arg(long)]
    single_thread: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
pub struct CheckGradientArgs {
    /// sbn | vae | toy | gaussian
    #[arg(long, default_value = "toy")]
    model: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of random parameter draws.
    #[arg(long, default_value_t = 5)]
    instances: u64,
    /// Comma-separated β values for the enumerated estimator check (toy only).
    #[arg(long, default_value = "0,0.5,1")]
    betas: String,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long)]
    single_thread: bool,
    #[arg(long, value_enum, default_value = "csv")]
    format: Format,
}

#[derive(Args)]
pub struct GradStdArgs {
    #[command(flatten)]
    run: RunFlags,
    /// Comma-separated estimators.
    #[arg(long, default_value = "cov")]
    estimator: String,
    /// Comma-separated sample counts (default: --S).
    #[arg(long = "S-axis")]
    s_axis: Option<String>,
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    posterior_q: bool,
}

#[derive(Args)]
pub struct CurveArgs {
    #[command(flatten)]
    run: RunFlags,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    posterior_q: bool,
    /// Comma-separated β values; overrides --grid.
    #[arg(long)]
    betas: Option<String>,
    /// Number of equally spaced knots on [0, 1].
    #[arg(long, default_value_t = 21)]
    grid: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
