use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Result, TvoError};
use crate::estimators::EstimatorKind;
use crate::objectives::{ObjectiveKind, Optimize};
use crate::path::Spacing;

use super::adam::DEFAULT_LR;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Sbn,
    Vae,
    Toy,
    Gaussian,
}

impl FromStr for ModelKind {
    type Err = TvoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "sbn" => ModelKind::Sbn,
            "vae" => ModelKind::Vae,
            "toy" => ModelKind::Toy,
            "gaussian" => ModelKind::Gaussian,
            other => return Err(TvoError::Unknown { kind: "model", name: other.into() }),
        })
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Sbn => "sbn",
            ModelKind::Vae => "vae",
            ModelKind::Toy => "toy",
            ModelKind::Gaussian => "gaussian",
        })
    }
}

/// How θ and φ are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainMode {
    /// One objective over the segments in `optimize`.
    Joint,
    /// Alternate θ steps on the objective with φ steps on the right-Riemann
    /// (upper) bound, on model-simulated data (sleep) or real data (wake).
    WakeSleep { phi_on_real_data: bool },
}

impl FromStr for TrainMode {
    type Err = TvoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "joint" => TrainMode::Joint,
            "wake-sleep" | "ws" => TrainMode::WakeSleep { phi_on_real_data: false },
            "wake-wake" | "rws" => TrainMode::WakeSleep { phi_on_real_data: true },
            other => return Err(TvoError::Unknown { kind: "training mode", name: other.into() }),
        })
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Joint => "joint",
            TrainMode::WakeSleep { phi_on_real_data: false } => "wake-sleep",
            TrainMode::WakeSleep { phi_on_real_data: true } => "wake-wake",
        })
    }
}

/// Everything a training run needs. Every field has a `key=value` spelling
/// identical to the corresponding CLI flag without dashes.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelKind,
    pub objective: ObjectiveKind,
    pub optimize: Optimize,
    pub mode: TrainMode,
    pub estimator: EstimatorKind,
    pub samples: usize,
    pub partitions: usize,
    pub beta1: f64,
    pub spacing: Spacing,
    pub lr: f64,
    pub batch: usize,
    pub iters: usize,
    pub eval_interval: usize,
    pub eval_samples: usize,
    pub eval_items: usize,
    pub grad_std_reps: usize,
    pub seed: u64,
    pub limit: Option<usize>,
    pub test_items: usize,
    pub data_dir: Option<PathBuf>,
    pub threshold: f64,
    pub out: Option<PathBuf>,
    pub crn: bool,
    pub single_thread: bool,
    pub latent_dim: usize,
    pub layers: usize,
    pub nonlinear: bool,
    pub hidden: usize,
    pub toy_latents: usize,
    pub toy_data_dim: usize,
    pub generator_seed: u64,
    /// Lift the desk-scale caps on iterations, samples and latent width.
    pub allow_large: bool,
}

pub const DESK_MAX_ITERS: usize = 200_000;
pub const DESK_MAX_SAMPLES: usize = 5_000;
pub const DESK_MAX_LATENT: usize = 64;

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Sbn,
            objective: ObjectiveKind::TvoLower,
            optimize: Optimize::Both,
            mode: TrainMode::Joint,
            estimator: EstimatorKind::Covariance,
            samples: 10,
            partitions: 2,
            beta1: 0.3,
            spacing: Spacing::Log,
            lr: DEFAULT_LR,
            batch: 24,
            iters: 20_000,
            eval_interval: 1_000,
            eval_samples: 500,
            eval_items: 200,
            grad_std_reps: 0,
            seed: 0,
            limit: Some(1_000),
            test_items: 200,
            data_dir: None,
            threshold: 0.5,
            out: None,
            crn: true,
            single_thread: false,
            latent_dim: 20,
            layers: 2,
            nonlinear: false,
            hidden: 20,
            toy_latents: 3,
            toy_data_dim: 6,
            generator_seed: 12_345,
            allow_large: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| TvoError::config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(TvoError::config(format!("invalid value `{value}` for `{key}` (expected on/off)"))),
    }
}

impl RunConfig {
    /// Sets one field from its `key=value` spelling.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let named = |e: TvoError| match e {
            TvoError::Unknown { kind, name } => TvoError::config(format!("unknown {kind} `{name}` for `{key}`")),
            other => other,
        };
        match key.trim().trim_start_matches("--").replace('-', "_").as_str() {
            "model" => self.model = v.parse().map_err(named)?,
            "objective" => self.objective = v.parse().map_err(named)?,
            "optimize" => self.optimize = v.parse().map_err(named)?,
            "mode" => self.mode = v.parse().map_err(named)?,
            "estimator" => self.estimator = v.parse().map_err(named)?,
            "S" | "s" | "samples" => self.samples = parse(key, v)?,
            "K" | "k" | "partitions" => self.partitions = parse(key, v)?,
            "beta1" => self.beta1 = parse(key, v)?,
            "spacing" => self.spacing = v.parse().map_err(named)?,
            "lr" => self.lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "iters" => self.iters = parse(key, v)?,
            "eval_interval" => self.eval_interval = parse(key, v)?,
            "eval_samples" => self.eval_samples = parse(key, v)?,
            "eval_items" => self.eval_items = parse(key, v)?,
            "grad_std_reps" => self.grad_std_reps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "limit" => self.limit = if v == "none" { None } else { Some(parse(key, v)?) },
            "test_items" => self.test_items = parse(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "threshold" => self.threshold = parse(key, v)?,
            "out" => self.out = Some(PathBuf::from(v)),
            "crn" => self.crn = parse_bool(key, v)?,
            "single_thread" => self.single_thread = parse_bool(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "nonlinear" => self.nonlinear = parse_bool(key, v)?,
            "hidden" => self.hidden = parse(key, v)?,
            "toy_latents" => self.toy_latents = parse(key, v)?,
            "toy_data_dim" => self.toy_data_dim = parse(key, v)?,
            "generator_seed" => self.generator_seed = parse(key, v)?,
            "allow_large" => self.allow_large = parse_bool(key, v)?,
            other => return Err(TvoError::config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| TvoError::config(format!("line {}: expected key = value, got `{line}`", i + 1)))?;
            self.set(k, v).map_err(|e| TvoError::config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("S", self.samples),
            ("K", self.partitions),
            ("batch", self.batch),
            ("eval_interval", self.eval_interval),
            ("eval_samples", self.eval_samples),
            ("eval_items", self.eval_items),
            ("test_items", self.test_items),
            ("latent_dim", self.latent_dim),
            ("layers", self.layers),
            ("hidden", self.hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TvoError::config(format!("{name} must be positive")));
            }
        }
        if self.limit == Some(0) {
            return Err(TvoError::config("limit must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TvoError::config("lr must be positive"));
        }
        if self.spacing == Spacing::Log && !(self.beta1 > 0.0 && self.beta1 < 1.0) {
            return Err(TvoError::config(format!("log spacing needs 0 < beta1 < 1, got {}", self.beta1)));
        }
        if self.grad_std_reps == 1 {
            return Err(TvoError::config("grad_std_reps must be 0 (off) or at least 2"));
        }
        if !self.allow_large {
            if self.iters > DESK_MAX_ITERS {
                return Err(TvoError::config(format!("iters above {DESK_MAX_ITERS} need allow_large")));
            }
            if self.samples > DESK_MAX_SAMPLES || self.eval_samples > DESK_MAX_SAMPLES {
                return Err(TvoError::config(format!("sample counts above {DESK_MAX_SAMPLES} need allow_large")));
            }
            if self.latent_dim > DESK_MAX_LATENT || self.hidden > 4 * DESK_MAX_LATENT {
                return Err(TvoError::config("latent widths above desk scale need allow_large"));
            }
        }
        if matches!(self.mode, TrainMode::WakeSleep { .. }) && self.estimator == EstimatorKind::Reparam {
            return Err(TvoError::config("wake-sleep training uses score-function estimators"));
        }
        Ok(())
    }

    /// Flat `key = value` text that [`RunConfig::apply_text`] reads back.
    pub fn to_text(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let mut lines = vec![
            format!("model = {}", self.model),
            format!("objective = {}", self.objective),
            format!(
                "optimize = {}",
                match self.optimize {
                    Optimize::Theta => "theta",
                    Optimize::Phi => "phi",
                    Optimize::Both => "both",
                }
            ),
            format!("mode = {}", self.mode),
            format!("estimator = {}", self.estimator),
            format!("S = {}", self.samples),
            format!("K = {}", self.partitions),
            format!("beta1 = {}", self.beta1),
            format!("spacing = {}", self.spacing),
            format!("lr = {}", self.lr),
            format!("batch = {}", self.batch),
            format!("iters = {}", self.iters),
            format!("eval_interval = {}", self.eval_interval),
            format!("eval_samples = {}", self.eval_samples),
            format!("eval_items = {}", self.eval_items),
            format!("grad_std_reps = {}", self.grad_std_reps),
            format!("seed = {}", self.seed),
            format!("limit = {}", self.limit.map_or("none".into(), |l| l.to_string())),
            format!("test_items = {}", self.test_items),
            format!("threshold = {}", self.threshold),
            format!("crn = {}", if self.crn { "on" } else { "off" }),
            format!("single_thread = {}", self.single_thread),
            format!("latent_dim = {}", self.latent_dim),
            format!("layers = {}", self.layers),
            format!("nonlinear = {}", self.nonlinear),
            format!("hidden = {}", self.hidden),
            format!("toy_latents = {}", self.toy_latents),
            format!("toy_data_dim = {}", self.toy_data_dim),
            format!("generator_seed = {}", self.generator_seed),
            format!("allow_large = {}", self.allow_large),
        ];
        if let Some(d) = opt_path(&self.data_dir) {
            lines.push(format!("data_dir = {d}"));
        }
        if let Some(o) = opt_path(&self.out) {
            lines.push(format!("out = {o}"));
        }
        lines.join("\n") + "\n"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig { samples: 7, beta1: 0.03, crn: false, out: Some("runs/a".into()), ..Default::default() };
        cfg.mode = TrainMode::WakeSleep { phi_on_real_data: true };
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn comments_and_errors() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("# desk run\nK = 5  # five partitions\n\nspacing=equal\n").unwrap();
        assert_eq!(cfg.partitions, 5);
        assert_eq!(cfg.spacing, Spacing::Equal);
        assert!(cfg.apply_text("bogus = 1").is_err());
        assert!(cfg.apply_text("K = many").is_err());
        assert!(cfg.apply_text("no equals sign").is_err());
    }

    #[test]
    fn desk_caps() {
        let cfg = RunConfig { iters: 4_000_000, ..Default::default() };
        assert!(cfg.validate().is_err());
        assert!(RunConfig { allow_large: true, ..cfg }.validate().is_ok());
        assert!(RunConfig { spacing: Spacing::Log, beta1: 1.0, ..Default::default() }.validate().is_err());
    }
}
