//! Geometric path `π_β ∝ p(x, z)^β q(z | x)^(1−β)`, partition schedules and
//! integrand curves `g(β) = E_{π_β}[U'(z)]`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::autodiff::RealArray;
use crate::error::{Result, TvoError};
use crate::estimators::{sample_log_weights, WeightTable};
use crate::models::LatentModel;
use crate::autodiff::ParamVector;
use crate::rng::Rng;

/// `U'(z) = log p(x, z) − log q(z | x)`, the β-derivative of `log π̃_β`.
pub fn potential_derivative(log_joint: f64, log_q: f64) -> Result<f64> {
    if log_q == f64::NEG_INFINITY {
        return Err(TvoError::domain("log q = -inf: sample lies outside the proposal support"));
    }
    if log_q.is_nan() || log_joint.is_nan() || log_q == f64::INFINITY {
        return Err(TvoError::Numerical(format!("invalid log densities ({log_joint}, {log_q})")));
    }
    Ok(log_joint - log_q)
}

/// `log π̃_β(z) = β log p(x, z) + (1 − β) log q(z | x)`.
pub fn log_unnormalized_path_density(log_joint: f64, log_q: f64, beta: f64) -> Result<f64> {
    check_beta(beta)?;
    if beta == 0.0 {
        return Ok(log_q);
    }
    if beta == 1.0 {
        return Ok(log_joint);
    }
    Ok(beta * log_joint + (1.0 - beta) * log_q)
}

pub(crate) fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(TvoError::domain(format!("beta must lie in [0, 1], got {beta}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Spacing {
    Equal,
    Log,
}

impl FromStr for Spacing {
    type Err = TvoError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(Spacing::Equal),
            "log" => Ok(Spacing::Log),
            other => Err(TvoError::Unknown { kind: "spacing", name: other.into() }),
        }
    }
}

impl fmt::Display for Spacing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Spacing::Equal => "equal",
            Spacing::Log => "log",
        })
    }
}

/// Knots `0 = β_0 < β_1 < … < β_K = 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionSchedule {
    betas: Vec<f64>,
}

impl PartitionSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self> {
        if betas.len() < 2 {
            return Err(TvoError::domain("a schedule needs at least the knots 0 and 1"));
        }
        if betas[0] != 0.0 || *betas.last().unwrap() != 1.0 {
            return Err(TvoError::domain(format!("schedule must start at 0 and end at 1, got {betas:?}")));
        }
        if betas.windows(2).any(|w| w[1].is_nan() || w[1] <= w[0]) {
            return Err(TvoError::domain(format!("schedule must be strictly increasing, got {betas:?}")));
        }
        Ok(Self { betas })
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    /// Number of partitions `K`.
    pub fn partitions(&self) -> usize {
        self.betas.len() - 1
    }

    /// `Δ_k = β_k − β_{k−1}` for `k = 1..=K`.
    pub fn widths(&self) -> Vec<f64> {
        self.betas.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

/// Equal spacing gives `β_k = k / K`. Log spacing gives `β_0 = 0` followed by
/// `K` points geometric from `beta1` to 1 inclusive.
pub fn make_schedule(partitions: usize, beta1: f64, spacing: Spacing) -> Result<PartitionSchedule> {
    if partitions == 0 {
        return Err(TvoError::domain("K must be at least 1"));
    }
    let k = partitions;
    let betas = match spacing {
        Spacing::Equal => (0..=k).map(|i| i as f64 / k as f64).collect(),
        Spacing::Log => {
            if !(beta1 > 0.0 && beta1 < 1.0) {
                return Err(TvoError::domain(format!("log spacing needs 0 < beta1 < 1, got {beta1}")));
            }
            let mut betas = vec![0.0];
            if k == 1 {
                betas.push(1.0);
            } else {
                let log_b1 = beta1.log10();
                for i in 0..k {
                    let t = i as f64 / (k - 1) as f64;
                    betas.push(10f64.powf(log_b1 * (1.0 - t)));
                }
                betas[1] = beta1;
                betas[k] = 1.0;
            }
            betas
        }
    };
    PartitionSchedule::new(betas)
}

/// Estimated integrand values on a β grid.
#[derive(Clone, Debug, PartialEq)]
pub struct IntegrandCurve {
    pub betas: Vec<f64>,
    pub values: Vec<f64>,
    pub std_errors: Option<Vec<f64>>,
}

impl IntegrandCurve {
    /// Grid point of maximum discrete curvature, the argmax over interior
    /// points of `g(β_{i+1}) − 2g(β_i) + g(β_{i−1})` scaled to non-uniform spacing.
    pub fn beta_star(&self) -> Option<f64> {
        let (b, g) = (&self.betas, &self.values);
        (1..b.len().saturating_sub(1))
            .map(|i| {
                let (h0, h1) = (b[i] - b[i - 1], b[i + 1] - b[i]);
                let curv = 2.0 * ((g[i + 1] - g[i]) / h1 - (g[i] - g[i - 1]) / h0) / (h0 + h1);
                (i, curv.abs())
            })
            .max_by(|a, c| a.1.total_cmp(&c.1))
            .map(|(i, _)| b[i])
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["beta", "g_estimate", "std_error"])?;
        for (i, (b, g)) in self.betas.iter().zip(&self.values).enumerate() {
            let se = self.std_errors.as_ref().map(|s| s[i].to_string()).unwrap_or_default();
            out.write_record([b.to_string(), g.to_string(), se])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_jsonl(&self, w: impl Write) -> Result<()> {
        let rows: Vec<_> = (0..self.betas.len())
            .map(|i| {
                serde_json::json!({
                    "beta": self.betas[i],
                    "g_estimate": self.values[i],
                    "std_error": self.std_errors.as_ref().map(|s| s[i]),
                })
            })
            .collect();
        crate::trainer::write_jsonl(&rows, w)
    }
}

/// Estimates `g(β)` on `grid` for every row of `x` from one shared batch of
/// `samples` draws per row, then averages over rows. Standard errors are the
/// self-normalized delta-method estimates, combined as independent across rows.
pub fn integrand_curve(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    grid: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> Result<IntegrandCurve> {
    for &b in grid {
        check_beta(b)?;
    }
    let n = x.rows();
    let mut values = vec![0.0; grid.len()];
    let mut var = vec![0.0; grid.len()];
    let log_w = sample_log_weights(model, params, x, samples, rng)?;
    for row in log_w.chunks(samples) {
        let table = WeightTable::new(row.to_vec(), grid.to_vec())?;
        for k in 0..grid.len() {
            values[k] += table.expectation(k, row)? / n as f64;
            var[k] += table.std_error(k, row)?.powi(2);
        }
    }
    let std_errors = var.iter().map(|v| v.sqrt() / n as f64).collect();
    Ok(IntegrandCurve { betas: grid.to_vec(), values, std_errors: Some(std_errors) })
}
