//! Tempered self-normalized importance weights and gradient estimators for
//! expectations under the path distributions `π_β`.
//!
//! Every estimator in this module targets the gradient of a weighted sum of
//! path expectations, `Σ_j c_j E_{π_{β_j}}[f_λ]`, averaged over the rows of a
//! data batch. Latent samples for all rows (and, without common random
//! numbers, all terms) are recorded on a single tape; the estimator only
//! decides the per-row cotangents fed to the reverse pass for the nodes
//! `log p(x, z)`, `log q(z | x)` and `f`.

use std::fmt;
use std::ops::Range;
use std::io::Write;
use std::str::FromStr;

use rayon::prelude::*;

use crate::autodiff::{ParamVector, RealArray, Tape};
use crate::error::{Result, TvoError};
use crate::models::{repeat_rows, DensityNodes, LatentKind, LatentModel, LatentRows};
use crate::path::check_beta;
use crate::rng::{self, Rng};

/// Largest latent dimension [`EstimatorKind::ExactEnumeration`] will enumerate.
pub const MAX_ENUMERATED_LATENTS: usize = 12;

/// Log-weights of one batch of `S` latent draws and their normalized tempered
/// weights at each β of a grid.
///
/// Column `k` holds `softmax(b_s + β_k log w_s)` over the batch, where the
/// per-sample base `b_s` is zero for draws from `q`. Enumerating every state
/// with `b_s = log q(z_s | x)` instead makes each column the exact `π_{β_k}`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightTable {
    betas: Vec<f64>,
    log_w: Vec<f64>,
    columns: Vec<Vec<f64>>,
}

impl WeightTable {
    /// Weights of draws from `q`.
    pub fn new(log_w: Vec<f64>, betas: Vec<f64>) -> Result<Self> {
        let base = vec![0.0; log_w.len()];
        Self::with_base(log_w, &base, betas)
    }

    pub fn with_base(log_w: Vec<f64>, log_base: &[f64], betas: Vec<f64>) -> Result<Self> {
        if log_w.is_empty() {
            return Err(TvoError::domain("weight table needs at least one sample"));
        }
        if log_base.len() != log_w.len() {
            return Err(TvoError::Shape {
                node: 0,
                op: "weight_table",
                detail: format!("{} base terms for {} samples", log_base.len(), log_w.len()),
            });
        }
        if log_w.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(TvoError::Numerical("log weights contain NaN or +inf".into()));
        }
        if log_w.iter().all(|&v| v == f64::NEG_INFINITY) {
            return Err(TvoError::DegenerateWeights(format!(
                "all {} log weights are -inf; the proposal misses the model's support",
                log_w.len()
            )));
        }
        let mut columns = Vec::with_capacity(betas.len());
        for &beta in &betas {
            check_beta(beta)?;
            let logits: Vec<f64> = log_w
                .iter()
                .zip(log_base)
                .map(|(&lw, &b)| if beta == 0.0 { b } else { b + beta * lw })
                .collect();
            columns.push(softmax(&logits));
        }
        Ok(Self { betas, log_w, columns })
    }

    pub fn samples(&self) -> usize {
        self.log_w.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn log_w(&self) -> &[f64] {
        &self.log_w
    }

    pub fn column(&self, k: usize) -> &[f64] {
        &self.columns[k]
    }

    /// Index of the column at exactly `beta`.
    pub fn index_of(&self, beta: f64) -> Result<usize> {
        self.betas
            .iter()
            .position(|&b| b == beta)
            .ok_or_else(|| TvoError::Usage(format!("weight table has no column at beta = {beta}")))
    }

    /// `Σ_s w̄_s^{β_k} f_s`.
    pub fn expectation(&self, k: usize, f: &[f64]) -> Result<f64> {
        self.check_len(f)?;
        let w = self.columns.get(k).ok_or_else(|| TvoError::Usage(format!("no weight column {k}")))?;
        Ok(w.iter().zip(f).map(|(w, f)| w * f).sum())
    }

    /// Delta-method standard error `sqrt(Σ_s w̄_s² (f_s − Ê)²)`.
    pub fn std_error(&self, k: usize, f: &[f64]) -> Result<f64> {
        let mean = self.expectation(k, f)?;
        let w = &self.columns[k];
        Ok(w.iter().zip(f).map(|(w, f)| (w * (f - mean)).powi(2)).sum::<f64>().sqrt())
    }

    /// Effective sample size `1 / Σ_s (w̄_s^{β_k})²`.
    pub fn effective_sample_size(&self, k: usize) -> f64 {
        1.0 / self.columns[k].iter().map(|w| w * w).sum::<f64>()
    }

    fn check_len(&self, f: &[f64]) -> Result<()> {
        if f.len() != self.samples() {
            return Err(TvoError::Shape {
                node: 0,
                op: "expectation",
                detail: format!("{} function values for {} samples", f.len(), self.samples()),
            });
        }
        Ok(())
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() }).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Draws `samples` latents per row of `x` from `q` and returns the log-weights
/// `log p(x, z) − log q(z | x)`, row-major by datum.
pub fn sample_log_weights(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    samples: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(TvoError::domain("need at least one sample"));
    }
    let xs = repeat_rows(x, samples);
    let z = model.sample_q(params, &xs, rng)?;
    let (lp, lq) = model.log_densities(params, &xs, &z)?;
    lp.iter().zip(&lq).map(|(&p, &q)| crate::path::potential_derivative(p, q)).collect()
}

/// One table per row of `x`, each built from `samples` fresh draws from `q`.
pub fn build_weight_table(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    samples: usize,
    betas: &[f64],
    seed: u64,
) -> Result<Vec<WeightTable>> {
    let mut rng = rng::rng(seed);
    let log_w = sample_log_weights(model, params, x, samples, &mut rng)?;
    log_w.chunks(samples).map(|row| WeightTable::new(row.to_vec(), betas.to_vec())).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    Covariance,
    Reinforce,
    ReinforceBaseline,
    Reparam,
    ExactEnumeration,
}

impl EstimatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Covariance => "cov",
            EstimatorKind::Reinforce => "reinforce",
            EstimatorKind::ReinforceBaseline => "reinforce-baseline",
            EstimatorKind::Reparam => "reparam",
            EstimatorKind::ExactEnumeration => "exact",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = TvoError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cov" | "covariance" => EstimatorKind::Covariance,
            "reinforce" => EstimatorKind::Reinforce,
            "reinforce-baseline" | "reinforce_baseline" => EstimatorKind::ReinforceBaseline,
            "reparam" => EstimatorKind::Reparam,
            "exact" | "exact_enumeration" => EstimatorKind::ExactEnumeration,
            other => return Err(TvoError::Unknown { kind: "estimator", name: other.into() }),
        })
    }
}

/// Per-sample scalar `f_λ(z)` whose path expectations are differentiated.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Integrand {
    /// `U'(z) = log p(x, z) − log q(z | x)`.
    InstantaneousElbo,
    LogJoint,
    Constant(f64),
}

impl Integrand {
    fn record(self, tape: &mut Tape, nodes: DensityNodes, rows: usize) -> crate::autodiff::NodeId {
        match self {
            Integrand::InstantaneousElbo => tape.sub(nodes.log_joint, nodes.log_q),
            Integrand::LogJoint => nodes.log_joint,
            Integrand::Constant(c) => tape.constant(RealArray::vector(vec![c; rows])),
        }
    }
}

/// One summand `coef · E_{π_beta}[f]` of the differentiated objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Term {
    pub beta: f64,
    pub coef: f64,
}

impl Term {
    pub fn new(beta: f64, coef: f64) -> Self {
        Self { beta, coef }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub samples: usize,
    /// Reuse one sample batch across all terms. Without it, every term draws
    /// its own batch, and the covariance estimator further draws separate
    /// batches for the two parts of `E[f ∇ log π̃] − E[f] E[∇ log π̃]`.
    pub crn: bool,
}

impl EstimatorConfig {
    pub fn new(kind: EstimatorKind, samples: usize) -> Self {
        Self { kind, samples, crn: true }
    }
}

/// A gradient over the full parameter vector with its provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientEstimate {
    pub vector: Vec<f64>,
    pub kind: EstimatorKind,
    pub samples: usize,
    pub partitions: usize,
    pub seed: u64,
    /// Estimate of `Σ_j c_j E_{π_{β_j}}[f]` from the same batch, averaged over rows.
    pub objective: f64,
}

/// Gradient of `Σ_j c_j E_{π_{β_j}}[f_λ]` averaged over the rows of `x`.
pub fn estimate_gradient(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    terms: &[Term],
    integrand: Integrand,
    config: EstimatorConfig,
    seed: u64,
) -> Result<GradientEstimate> {
    if terms.is_empty() {
        return Err(TvoError::Usage("no objective terms".into()));
    }
    for t in terms {
        check_beta(t.beta)?;
    }
    if config.samples == 0 && config.kind != EstimatorKind::ExactEnumeration {
        return Err(TvoError::domain("need at least one sample"));
    }
    model.validate_x(x)?;
    let mut rng = rng::rng(seed);
    let (vector, objective) = match config.kind {
        EstimatorKind::Reparam => pathwise(model, params, x, terms, integrand, config.samples, false, &mut rng)?,
        EstimatorKind::ExactEnumeration => exact(model, params, x, terms, integrand)?,
        kind => score(model, params, x, terms, integrand, kind, config.samples, config.crn, &mut rng)?,
    };
    if let Some(d) = vector.iter().position(|v| !v.is_finite()) {
        let name = params.layout().segment_of(d).map(|s| s.name.clone()).unwrap_or_default();
        return Err(TvoError::Numerical(format!("non-finite gradient at coordinate {d} (segment {name})")));
    }
    Ok(GradientEstimate {
        vector,
        kind: config.kind,
        samples: config.samples,
        partitions: terms.len(),
        seed,
        objective,
    })
}

/// `E_{π_β}[∇f] + Cov_{π_β}[∇ log π̃_β, f]` from `samples` draws per row.
pub fn covariance_gradient(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    integrand: Integrand,
    beta: f64,
    samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    let cfg = EstimatorConfig::new(EstimatorKind::Covariance, samples);
    estimate_gradient(model, params, x, &[Term::new(beta, 1.0)], integrand, cfg, seed)
}

/// Score-function estimate `E_q[∇f + f ∇ log q]`; only defined at β = 0.
pub fn reinforce_gradient(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    integrand: Integrand,
    beta: f64,
    samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    let cfg = EstimatorConfig::new(EstimatorKind::Reinforce, samples);
    estimate_gradient(model, params, x, &[Term::new(beta, 1.0)], integrand, cfg, seed)
}

/// Score-function estimate with a leave-one-out baseline and the normalized
/// score `∇ log π̃ − E[∇ log π̃]`.
pub fn reinforce_baseline_gradient(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    integrand: Integrand,
    beta: f64,
    samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    let cfg = EstimatorConfig::new(EstimatorKind::ReinforceBaseline, samples);
    estimate_gradient(model, params, x, &[Term::new(beta, 1.0)], integrand, cfg, seed)
}

/// Pathwise gradient of the self-normalized Monte Carlo estimate with `z = μ + σ ε`.
pub fn reparam_gradient(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    integrand: Integrand,
    beta: f64,
    samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    let cfg = EstimatorConfig::new(EstimatorKind::Reparam, samples);
    estimate_gradient(model, params, x, &[Term::new(beta, 1.0)], integrand, cfg, seed)
}

/// Pathwise gradient of the IWAE bound `log (1/S) Σ_s w_s` (continuous q only).
pub fn iwae_reparam_gradient(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    samples: usize,
    seed: u64,
) -> Result<GradientEstimate> {
    model.validate_x(x)?;
    let mut rng = rng::rng(seed);
    let (vector, objective) =
        pathwise(model, params, x, &[Term::new(1.0, 1.0)], Integrand::InstantaneousElbo, samples, true, &mut rng)?;
    Ok(GradientEstimate { vector, kind: EstimatorKind::Reparam, samples, partitions: 1, seed, objective })
}

/// Sample rows for one tape: `groups` consecutive blocks of `samples` rows per datum.
struct Recorded {
    tape: Tape,
    nodes: DensityNodes,
    f: crate::autodiff::NodeId,
    lp: Vec<f64>,
    lq: Vec<f64>,
    fv: Vec<f64>,
}

fn record_rows(
    model: &dyn LatentModel,
    params: &ParamVector,
    xs: &RealArray,
    z: LatentRows<'_>,
    integrand: Integrand,
) -> Result<Recorded> {
    let mut tape = Tape::new();
    let nodes = model.record(&mut tape, xs, z)?;
    let f = integrand.record(&mut tape, nodes, xs.rows());
    tape.evaluate(params, &Default::default())?;
    let lp = tape.value(nodes.log_joint)?.data().to_vec();
    let lq = tape.value(nodes.log_q)?.data().to_vec();
    let fv = tape.value(f)?.data().to_vec();
    Ok(Recorded { tape, nodes, f, lp, lq, fv })
}

struct Cotangents {
    p: Vec<f64>,
    q: Vec<f64>,
    f: Vec<f64>,
}

impl Cotangents {
    fn zeros(n: usize) -> Self {
        Self { p: vec![0.0; n], q: vec![0.0; n], f: vec![0.0; n] }
    }

    fn scale(&mut self, c: f64) {
        for v in self.p.iter_mut().chain(&mut self.q).chain(&mut self.f) {
            *v *= c;
        }
    }

    fn backward(&self, rec: &Recorded) -> Result<Vec<f64>> {
        rec.tape.backward_from(&[(rec.nodes.log_joint, &self.p), (rec.nodes.log_q, &self.q), (rec.f, &self.f)])
    }
}

fn log_weights(rec: &Recorded, range: Range<usize>) -> Result<Vec<f64>> {
    range.map(|i| crate::path::potential_derivative(rec.lp[i], rec.lq[i])).collect()
}

/// Adds the covariance-estimator cotangents of `coef · E_{π_β}[f]` for the rows in `range`.
fn covariance_cotangents(ct: &mut Cotangents, w: &[f64], f: &[f64], offset: usize, beta: f64, coef: f64) {
    let mean: f64 = w.iter().zip(f).map(|(w, f)| w * f).sum();
    for (s, (&ws, &fs)) in w.iter().zip(f).enumerate() {
        let i = offset + s;
        ct.f[i] += coef * ws;
        // the centering of ∇ log π̃ cancels exactly because Σ_s d_s = 0
        let d = coef * ws * (fs - mean);
        ct.p[i] += beta * d;
        ct.q[i] += (1.0 - beta) * d;
    }
}

#[allow(clippy::too_many_arguments)]
fn score(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    terms: &[Term],
    integrand: Integrand,
    kind: EstimatorKind,
    samples: usize,
    crn: bool,
    rng: &mut Rng,
) -> Result<(Vec<f64>, f64)> {
    if kind == EstimatorKind::Reinforce {
        if let Some(t) = terms.iter().find(|t| t.beta != 0.0) {
            return Err(TvoError::Unsupported(format!(
                "plain REINFORCE needs log π_β, whose normalizer is intractable at beta = {}",
                t.beta
            )));
        }
    }
    let n = x.rows();
    // CRN: one batch per datum shared by all terms. Otherwise one batch per
    // term, and for the covariance estimator the positive part E[f ∇ log π̃]
    // and the negative part E[f] E[∇ log π̃] of each term get separate batches.
    let split = !crn && kind == EstimatorKind::Covariance;
    let blocks = match (crn, split) {
        (true, _) => 1,
        (false, false) => terms.len(),
        (false, true) => 2 * terms.len(),
    };
    let xs = repeat_rows(x, blocks * samples);
    let z = model.sample_q(params, &xs, rng)?;
    let rec = record_rows(model, params, &xs, LatentRows::Values(&z), integrand)?;
    let mut ct = Cotangents::zeros(xs.rows());
    let mut objective = 0.0;
    for b in 0..n {
        if split {
            let datum = b * blocks * samples;
            for (k, t) in terms.iter().enumerate() {
                let outer = datum + 2 * k * samples..datum + (2 * k + 1) * samples;
                let inner = outer.end..outer.end + samples;
                objective += t.coef * split_covariance_cotangents(&mut ct, &rec, outer, inner, *t)?;
            }
            continue;
        }
        for block in 0..blocks {
            let start = (b * blocks + block) * samples;
            let range = start..start + samples;
            let block_terms = if crn { terms } else { &terms[block..block + 1] };
            let betas: Vec<f64> = block_terms.iter().map(|t| t.beta).collect();
            let table = WeightTable::new(log_weights(&rec, range.clone())?, betas)?;
            let f = &rec.fv[range.clone()];
            for (k, t) in block_terms.iter().enumerate() {
                let w = table.column(k);
                objective += t.coef * table.expectation(k, f)?;
                match kind {
                    EstimatorKind::Covariance => covariance_cotangents(&mut ct, w, f, start, t.beta, t.coef),
                    EstimatorKind::Reinforce => {
                        for (s, &fs) in f.iter().enumerate() {
                            ct.f[start + s] += t.coef / samples as f64;
                            ct.q[start + s] += t.coef * fs / samples as f64;
                        }
                    }
                    EstimatorKind::ReinforceBaseline => reinforce_baseline_cotangents(&mut ct, w, f, start, t.beta, t.coef),
                    _ => unreachable!(),
                }
            }
        }
    }
    ct.scale(1.0 / n as f64);
    Ok((ct.backward(&rec)?, objective / n as f64))
}

/// Covariance estimate with `E[∇f + f ∇ log π̃]` from the `outer` rows and
/// `E[f] E[∇ log π̃]` from the independent `inner` rows. Returns the outer
/// estimate of `E_{π_β}[f]`.
fn split_covariance_cotangents(
    ct: &mut Cotangents,
    rec: &Recorded,
    outer: Range<usize>,
    inner: Range<usize>,
    t: Term,
) -> Result<f64> {
    let wo = WeightTable::new(log_weights(rec, outer.clone())?, vec![t.beta])?;
    let wi = WeightTable::new(log_weights(rec, inner.clone())?, vec![t.beta])?;
    let fo = &rec.fv[outer.clone()];
    let fi = &rec.fv[inner.clone()];
    for (s, (&ws, &fs)) in wo.column(0).iter().zip(fo).enumerate() {
        let i = outer.start + s;
        ct.f[i] += t.coef * ws;
        ct.p[i] += t.coef * t.beta * ws * fs;
        ct.q[i] += t.coef * (1.0 - t.beta) * ws * fs;
    }
    let mean_f = wi.expectation(0, fi)?;
    for (s, &ws) in wi.column(0).iter().enumerate() {
        let i = inner.start + s;
        ct.p[i] -= t.coef * t.beta * mean_f * ws;
        ct.q[i] -= t.coef * (1.0 - t.beta) * mean_f * ws;
    }
    wo.expectation(0, fo)
}

/// Leave-one-out baseline `b_{−s} = Σ_{t≠s} w̄_t f_t / (1 − w̄_s)` with the
/// score normalized by the lemma `∇ log Z_β = E_{π_β}[∇ log π̃_β]`.
fn reinforce_baseline_cotangents(ct: &mut Cotangents, w: &[f64], f: &[f64], offset: usize, beta: f64, coef: f64) {
    let total: f64 = w.iter().zip(f).map(|(w, f)| w * f).sum();
    let mut d_sum = 0.0;
    let mut d = Vec::with_capacity(w.len());
    for (&ws, &fs) in w.iter().zip(f) {
        let rest = 1.0 - ws;
        let baseline = if rest > 1e-300 { (total - ws * fs) / rest } else { 0.0 };
        let ds = coef * ws * (fs - baseline);
        d_sum += ds;
        d.push(ds);
    }
    for (s, (&ws, &ds)) in w.iter().zip(&d).enumerate() {
        let i = offset + s;
        ct.f[i] += coef * ws;
        ct.p[i] += beta * (ds - d_sum * ws);
        ct.q[i] += (1.0 - beta) * (ds - d_sum * ws);
    }
}

#[allow(clippy::too_many_arguments)]
fn pathwise(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    terms: &[Term],
    integrand: Integrand,
    samples: usize,
    iwae: bool,
    rng: &mut Rng,
) -> Result<(Vec<f64>, f64)> {
    if !model.supports_reparam() {
        return Err(TvoError::Unsupported(format!(
            "the reparameterization estimator needs a continuous location-scale q; {} has none",
            model.name()
        )));
    }
    let n = x.rows();
    let xs = repeat_rows(x, samples);
    let eps = crate::models::standard_normal(xs.rows(), model.latent().dim(), rng);
    let rec = record_rows(model, params, &xs, LatentRows::Reparam(&eps), integrand)?;
    let mut ct = Cotangents::zeros(xs.rows());
    let mut objective = 0.0;
    let betas: Vec<f64> = terms.iter().map(|t| t.beta).collect();
    for b in 0..n {
        let range = b * samples..(b + 1) * samples;
        let log_w = log_weights(&rec, range.clone())?;
        if iwae {
            objective += crate::autodiff::log_sum_exp(&log_w) - (samples as f64).ln();
            let table = WeightTable::new(log_w, vec![1.0])?;
            for (s, &ws) in table.column(0).iter().enumerate() {
                ct.p[range.start + s] += ws;
                ct.q[range.start + s] -= ws;
            }
            continue;
        }
        let table = WeightTable::new(log_w, betas.clone())?;
        let f = &rec.fv[range.clone()];
        for (k, t) in terms.iter().enumerate() {
            let mean = table.expectation(k, f)?;
            objective += t.coef * mean;
            for (s, (&ws, &fs)) in table.column(k).iter().zip(f).enumerate() {
                let i = range.start + s;
                ct.f[i] += t.coef * ws;
                let dlw = t.coef * t.beta * ws * (fs - mean);
                ct.p[i] += dlw;
                ct.q[i] -= dlw;
            }
        }
    }
    ct.scale(1.0 / n as f64);
    Ok((ct.backward(&rec)?, objective / n as f64))
}

/// All `2^M` binary latent states, one per row.
pub fn enumerate_states(latents: usize) -> Result<RealArray> {
    if latents > MAX_ENUMERATED_LATENTS {
        return Err(TvoError::domain(format!(
            "refusing to enumerate 2^{latents} states (limit 2^{MAX_ENUMERATED_LATENTS})"
        )));
    }
    let states = 1usize << latents;
    let data = (0..states).flat_map(|s| (0..latents).map(move |j| ((s >> j) & 1) as f64)).collect();
    RealArray::matrix(states, latents, data)
}

fn exact(
    model: &dyn LatentModel,
    params: &ParamVector,
    x: &RealArray,
    terms: &[Term],
    integrand: Integrand,
) -> Result<(Vec<f64>, f64)> {
    let LatentKind::Discrete(m) = model.latent() else {
        return Err(TvoError::Unsupported("exact enumeration needs discrete latents".into()));
    };
    let states = enumerate_states(m)?;
    let count = states.rows();
    let n = x.rows();
    let xs = repeat_rows(x, count);
    let mut zdata = Vec::with_capacity(n * states.len());
    for _ in 0..n {
        zdata.extend_from_slice(states.data());
    }
    let z = RealArray::matrix(n * count, m, zdata)?;
    let rec = record_rows(model, params, &xs, LatentRows::Values(&z), integrand)?;
    let mut ct = Cotangents::zeros(xs.rows());
    let mut objective = 0.0;
    let betas: Vec<f64> = terms.iter().map(|t| t.beta).collect();
    for b in 0..n {
        let range = b * count..(b + 1) * count;
        let table = WeightTable::with_base(log_weights(&rec, range.clone())?, &rec.lq[range.clone()], betas.clone())?;
        let f = &rec.fv[range.clone()];
        for (k, t) in terms.iter().enumerate() {
            objective += t.coef * table.expectation(k, f)?;
            covariance_cotangents(&mut ct, table.column(k), f, range.start, t.beta, t.coef);
        }
    }
    ct.scale(1.0 / n as f64);
    Ok((ct.backward(&rec)?, objective / n as f64))
}

/// Per-coordinate sample standard deviation over independent estimates,
/// averaged over coordinates. Repetition `r` receives its own seed derived
/// from `(seed, r)`; repetitions run on the current rayon pool.
pub fn gradient_std_diagnostic<F>(repetitions: usize, seed: u64, estimate: F) -> Result<f64>
where
    F: Fn(u64) -> Result<Vec<f64>> + Sync,
{
    if repetitions < 2 {
        return Err(TvoError::domain("gradient std needs at least two repetitions"));
    }
    let grads: Vec<Vec<f64>> = (0..repetitions as u64)
        .into_par_iter()
        .map(|r| estimate(rng::derive_seed(seed, r)))
        .collect::<Result<_>>()?;
    Ok(mean_coordinate_std(&grads))
}

/// Mean over coordinates of the per-coordinate sample standard deviation.
pub fn mean_coordinate_std(grads: &[Vec<f64>]) -> f64 {
    let d = grads[0].len();
    let r = grads.len() as f64;
    let mut total = 0.0;
    for j in 0..d {
        // shifted by the first value so identical estimates give exactly zero
        let origin = grads[0][j];
        let mean = grads.iter().map(|g| g[j] - origin).sum::<f64>() / r;
        let var = grads.iter().map(|g| (g[j] - origin - mean).powi(2)).sum::<f64>() / (r - 1.0);
        total += var.sqrt();
    }
    total / d as f64
}

/// One row of gradient-std diagnostics.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct GradStdRow {
    pub estimator: String,
    #[serde(rename = "S")]
    pub samples: usize,
    #[serde(rename = "K")]
    pub partitions: usize,
    pub beta1: f64,
    pub iteration: usize,
    pub avg_std: f64,
}

pub fn write_grad_std_csv(rows: &[GradStdRow], w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["estimator", "S", "K", "beta1", "iteration", "avg_std"])?;
    for r in rows {
        out.write_record([
            r.estimator.clone(),
            r.samples.to_string(),
            r.partitions.to_string(),
            r.beta1.to_string(),
            r.iteration.to_string(),
            r.avg_std.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_grad_std_jsonl(rows: &[GradStdRow], w: impl Write) -> Result<()> {
    crate::trainer::write_jsonl(rows, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_column_at_zero() {
        let t = WeightTable::new(vec![-3.0, 0.5, 2.0], vec![0.0]).unwrap();
        for &w in t.column(0) {
            assert!((w - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn tempered_weights_examples() {
        let t = WeightTable::new(vec![0.0, 3f64.ln()], vec![0.5, 1.0]).unwrap();
        let r = 3f64.sqrt();
        assert!((t.column(0)[0] - 1.0 / (1.0 + r)).abs() < 1e-15);
        assert!((t.column(0)[1] - r / (1.0 + r)).abs() < 1e-15);
        assert!((t.column(0)[0] - 0.36603).abs() < 1e-5);
        assert!((t.column(1)[0] - 0.25).abs() < 1e-15);
        assert!((t.column(1)[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn expectations() {
        let t = WeightTable::new(vec![0.0, -1.0, 2.0], vec![0.0, 0.7]).unwrap();
        assert!((t.expectation(1, &[4.0, 4.0, 4.0]).unwrap() - 4.0).abs() < 1e-14);
        assert!((t.expectation(0, &[1.0, 2.0, 6.0]).unwrap() - 3.0).abs() < 1e-14);
        assert!(matches!(t.expectation(0, &[1.0]), Err(TvoError::Shape { .. })));
    }

    #[test]
    fn degenerate_weights_rejected() {
        let err = WeightTable::new(vec![f64::NEG_INFINITY; 3], vec![0.0, 1.0]).unwrap_err();
        assert!(matches!(err, TvoError::DegenerateWeights(_)));
        assert!(WeightTable::new(vec![0.0], vec![1.2]).is_err());
    }

    #[test]
    fn ess_bounds() {
        let t = WeightTable::new(vec![0.0, 0.0, -50.0], vec![0.0, 1.0]).unwrap();
        assert!((t.effective_sample_size(0) - 3.0).abs() < 1e-12);
        assert!((t.effective_sample_size(1) - 2.0).abs() < 1e-9);
    }

    #[test]
    fn std_of_identical_estimates_is_zero() {
        let grads = vec![vec![1.0, 2.0]; 4];
        assert_eq!(mean_coordinate_std(&grads), 0.0);
        let grads = vec![vec![0.0, 1.0], vec![2.0, 1.0]];
        assert!((mean_coordinate_std(&grads) - 2f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn estimator_names_round_trip() {
        for k in [
            EstimatorKind::Covariance,
            EstimatorKind::Reinforce,
            EstimatorKind::ReinforceBaseline,
            EstimatorKind::Reparam,
            EstimatorKind::ExactEnumeration,
        ] {
            assert_eq!(k.as_str().parse::<EstimatorKind>().unwrap(), k);
        }
    }
}
