//! ELBO, EUBO, the left/right Riemann-sum TVO bounds, IWAE, and the
//! training-gradient assembly for every objective mode.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{log_sum_exp, ParamVector, RealArray, Role};
use crate::error::{Result, TvoError};
use crate::estimators::{
    estimate_gradient, iwae_reparam_gradient, EstimatorConfig, EstimatorKind, GradientEstimate, Integrand, Term,
    WeightTable,
};
use crate::models::LatentModel;
use crate::path::PartitionSchedule;
use crate::rng;

/// Effective sample size below which an EUBO estimate is flagged.
pub const MIN_EUBO_ESS: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectiveKind {
    Elbo,
    Eubo,
    TvoLower,
    TvoUpper,
    Iwae,
}

impl ObjectiveKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveKind::Elbo => "elbo",
            ObjectiveKind::Eubo => "eubo",
            ObjectiveKind::TvoLower => "tvo_lower",
            ObjectiveKind::TvoUpper => "tvo_upper",
            ObjectiveKind::Iwae => "iwae",
        }
    }

    /// Lower bounds are maximized, upper bounds minimized.
    pub fn default_direction(self) -> Direction {
        match self {
            ObjectiveKind::Eubo | ObjectiveKind::TvoUpper => Direction::Minimize,
            _ => Direction::Maximize,
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveKind {
    type Err = TvoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "elbo" => ObjectiveKind::Elbo,
            "eubo" => ObjectiveKind::Eubo,
            "tvo_lower" | "tvo-lower" | "tvo" => ObjectiveKind::TvoLower,
            "tvo_upper" | "tvo-upper" => ObjectiveKind::TvoUpper,
            "iwae" => ObjectiveKind::Iwae,
            other => return Err(TvoError::Unknown { kind: "objective", name: other.into() }),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Maximize,
    Minimize,
}

/// Which parameter segments receive gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Optimize {
    Theta,
    Phi,
    Both,
}

impl FromStr for Optimize {
    type Err = TvoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "theta" => Optimize::Theta,
            "phi" => Optimize::Phi,
            "both" => Optimize::Both,
            other => return Err(TvoError::Unknown { kind: "optimize target", name: other.into() }),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Real,
    /// Data drawn from `p_θ(x, z)` by ancestral sampling (sleep phase).
    ModelSimulated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub schedule: PartitionSchedule,
    pub samples: usize,
    pub optimize: Optimize,
    pub data_source: DataSource,
    pub direction: Direction,
    pub estimator: EstimatorKind,
    pub crn: bool,
}

impl ObjectiveSpec {
    pub fn new(kind: ObjectiveKind, schedule: PartitionSchedule, samples: usize) -> Self {
        Self {
            kind,
            schedule,
            samples,
            optimize: Optimize::Both,
            data_source: DataSource::Real,
            direction: kind.default_direction(),
            estimator: EstimatorKind::Covariance,
            crn: true,
        }
    }

    pub fn optimize(mut self, optimize: Optimize) -> Self {
        self.optimize = optimize;
        self
    }

    pub fn data_source(mut self, source: DataSource) -> Self {
        self.data_source = source;
        self
    }

    pub fn estimator(mut self, kind: EstimatorKind) -> Self {
        self.estimator = kind;
        self
    }

    pub fn crn(mut self, crn: bool) -> Self {
        self.crn = crn;
        self
    }

    /// `(β, coefficient)` pairs of the path-expectation sum this objective is.
    pub fn terms(&self) -> Vec<Term> {
        let b = self.schedule.betas();
        let widths = self.schedule.widths();
        match self.kind {
            ObjectiveKind::Elbo => vec![Term::new(0.0, 1.0)],
            ObjectiveKind::Eubo | ObjectiveKind::Iwae => vec![Term::new(1.0, 1.0)],
            ObjectiveKind::TvoLower => widths.iter().enumerate().map(|(k, &d)| Term::new(b[k], d)).collect(),
            ObjectiveKind::TvoUpper => widths.iter().enumerate().map(|(k, &d)| Term::new(b[k + 1], d)).collect(),
        }
    }

    pub fn validate(&self, model: &dyn LatentModel) -> Result<()> {
        if self.samples == 0 && self.estimator != EstimatorKind::ExactEnumeration {
            return Err(TvoError::config("S must be at least 1"));
        }
        if self.estimator == EstimatorKind::Reparam && !model.supports_reparam() {
            return Err(TvoError::config(format!(
                "the reparameterization estimator needs continuous latents; {} is discrete",
                model.name()
            )));
        }
        if self.kind == ObjectiveKind::Iwae && self.estimator != EstimatorKind::Reparam {
            return Err(TvoError::config("IWAE training is only provided with the reparameterization estimator"));
        }
        if self.data_source == DataSource::ModelSimulated && self.optimize != Optimize::Phi {
            return Err(TvoError::config("model-simulated data trains phi only (theta is held fixed)"));
        }
        Ok(())
    }
}

fn check_schedule(table: &WeightTable, schedule: &PartitionSchedule) -> Result<()> {
    if table.betas() != schedule.betas() {
        return Err(TvoError::Shape {
            node: 0,
            op: "tvo",
            detail: format!(
                "weight table knots {:?} do not match schedule knots {:?}",
                table.betas(),
                schedule.betas()
            ),
        });
    }
    Ok(())
}

/// `g(β_k) = Σ_s w̄_s^{β_k} U'(z_s)`.
fn integrand_at(table: &WeightTable, k: usize) -> Result<f64> {
    table.expectation(k, table.log_w())
}

/// Average of `U'(z_s)` under the β = 0 column.
pub fn elbo_estimate(table: &WeightTable) -> Result<f64> {
    integrand_at(table, table.index_of(0.0)?)
}

/// A bound estimate with a low effective-sample-size flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlaggedEstimate {
    pub value: f64,
    pub effective_sample_size: f64,
    pub low_ess: bool,
}

/// Self-normalized estimate of `E_{p(z|x)}[U']` from the β = 1 column.
pub fn eubo_estimate(table: &WeightTable) -> Result<FlaggedEstimate> {
    let k = table.index_of(1.0)?;
    let ess = table.effective_sample_size(k);
    Ok(FlaggedEstimate { value: integrand_at(table, k)?, effective_sample_size: ess, low_ess: ess < MIN_EUBO_ESS })
}

/// Left Riemann sum `Σ_k Δ_k g(β_{k−1})`.
pub fn tvo_lower(table: &WeightTable, schedule: &PartitionSchedule) -> Result<f64> {
    check_schedule(table, schedule)?;
    let mut total = 0.0;
    for (k, d) in schedule.widths().iter().enumerate() {
        total += d * integrand_at(table, k)?;
    }
    Ok(total)
}

/// Right Riemann sum `Σ_k Δ_k g(β_k)`.
pub fn tvo_upper(table: &WeightTable, schedule: &PartitionSchedule) -> Result<f64> {
    check_schedule(table, schedule)?;
    let mut total = 0.0;
    for (k, d) in schedule.widths().iter().enumerate() {
        total += d * integrand_at(table, k + 1)?;
    }
    Ok(total)
}

/// `log (1/S) Σ_s w_s`.
pub fn iwae_estimate(log_w: &[f64]) -> Result<f64> {
    if log_w.is_empty() {
        return Err(TvoError::domain("IWAE needs at least one weight"));
    }
    if log_w.len() == 1 {
        return Ok(log_w[0]);
    }
    Ok(log_sum_exp(log_w) - (log_w.len() as f64).ln())
}

/// Objective value on a table built over the spec's schedule.
pub fn objective_value(spec: &ObjectiveSpec, table: &WeightTable) -> Result<f64> {
    match spec.kind {
        ObjectiveKind::Elbo => elbo_estimate(table),
        ObjectiveKind::Eubo => Ok(eubo_estimate(table)?.value),
        ObjectiveKind::TvoLower => tvo_lower(table, &spec.schedule),
        ObjectiveKind::TvoUpper => tvo_upper(table, &spec.schedule),
        ObjectiveKind::Iwae => iwae_estimate(table.log_w()),
    }
}

/// Estimated gradient of the objective for one data batch, in ascent
/// orientation (callers flip the sign for minimized objectives), with
/// segments outside `spec.optimize` set to zero.
///
/// With model-simulated data the batch `x` only sets the batch size: fresh
/// `(x, z) ~ p_θ` replace it, and the θ block is zero.
pub fn training_gradient(
    spec: &ObjectiveSpec,
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    seed: u64,
) -> Result<GradientEstimate> {
    spec.validate(model)?;
    let simulated;
    let data = match spec.data_source {
        DataSource::Real => x,
        DataSource::ModelSimulated => {
            let mut r = rng::stream(seed, 1);
            simulated = model.sample_joint(params, x.rows(), &mut r)?.0;
            &simulated
        }
    };
    let mut est = if spec.kind == ObjectiveKind::Iwae {
        iwae_reparam_gradient(model, params, data, spec.samples, seed)?
    } else {
        let cfg = EstimatorConfig { kind: spec.estimator, samples: spec.samples, crn: spec.crn };
        estimate_gradient(model, params, data, &spec.terms(), Integrand::InstantaneousElbo, cfg, seed)?
    };
    est.partitions = spec.schedule.partitions();
    let keep: &[Role] = match spec.optimize {
        Optimize::Theta => &[Role::Theta],
        Optimize::Phi => &[Role::Phi],
        Optimize::Both => &[Role::Theta, Role::Phi],
    };
    let mask = params.layout().role_mask(keep);
    for (g, m) in est.vector.iter_mut().zip(mask) {
        *g *= m;
    }
    Ok(est)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::path::{make_schedule, Spacing};

    #[test]
    fn k1_reductions_are_bit_identical() {
        let sched = make_schedule(1, 0.5, Spacing::Equal).unwrap();
        let table = WeightTable::new(vec![-3.1, -0.2, -7.7, 1.3], sched.betas().to_vec()).unwrap();
        assert_eq!(tvo_lower(&table, &sched).unwrap().to_bits(), elbo_estimate(&table).unwrap().to_bits());
        assert_eq!(tvo_upper(&table, &sched).unwrap().to_bits(), eubo_estimate(&table).unwrap().value.to_bits());
    }

    #[test]
    fn iwae_examples() {
        assert_eq!(iwae_estimate(&[-4.25]).unwrap(), -4.25);
        assert!((iwae_estimate(&[2.0; 7]).unwrap() - 2.0).abs() < 1e-14);
        assert!(iwae_estimate(&[]).is_err());
    }

    #[test]
    fn schedule_mismatch_is_structural() {
        let sched = make_schedule(2, 0.5, Spacing::Equal).unwrap();
        let table = WeightTable::new(vec![0.0, 1.0], vec![0.0, 1.0]).unwrap();
        assert!(matches!(tvo_lower(&table, &sched), Err(TvoError::Shape { .. })));
    }

    #[test]
    fn constant_weights_give_plain_mean() {
        let table = WeightTable::new(vec![-2.0; 4], vec![0.0, 1.0]).unwrap();
        let e = eubo_estimate(&table).unwrap();
        assert!((e.value + 2.0).abs() < 1e-15);
        assert!(!e.low_ess);
        let peaked = WeightTable::new(vec![0.0, -100.0, -100.0], vec![0.0, 1.0]).unwrap();
        assert!(eubo_estimate(&peaked).unwrap().low_ess);
    }

    #[test]
    fn terms_follow_widths() {
        let sched = make_schedule(3, 0.01, Spacing::Log).unwrap();
        let lower = ObjectiveSpec::new(ObjectiveKind::TvoLower, sched.clone(), 5).terms();
        let upper = ObjectiveSpec::new(ObjectiveKind::TvoUpper, sched, 5).terms();
        assert_eq!(lower.iter().map(|t| t.beta).collect::<Vec<_>>(), vec![0.0, 0.01, 0.1]);
        assert_eq!(upper.iter().map(|t| t.beta).collect::<Vec<_>>(), vec![0.01, 0.1, 1.0]);
        let total: f64 = lower.iter().map(|t| t.coef).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }
}
