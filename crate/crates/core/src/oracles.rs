//! Ground truth by exhaustive enumeration and quadrature.

use crate::autodiff::{finite_difference_gradient, log_sum_exp, relative_error, Inputs, ParamVector, RealArray, Tape};
use crate::error::{Result, TvoError};
use crate::estimators::{enumerate_states, estimate_gradient, EstimatorConfig, EstimatorKind, Integrand, Term, WeightTable};
use crate::models::{LatentKind, LatentModel, LatentRows};
use crate::path::check_beta;

/// Exact quantities for one datum of a model with few binary latents.
#[derive(Clone, Debug, PartialEq)]
pub struct EnumerationResult {
    pub states: RealArray,
    pub log_joint: Vec<f64>,
    pub log_q: Vec<f64>,
    pub log_evidence: f64,
    /// `p(z | x)` for every state, in state order.
    pub posterior: Vec<f64>,
}

/// Sums over all `2^M` latent states for the datum `x`.
pub fn enumerate(model: &dyn LatentModel, params: &ParamVector, x: &[f64]) -> Result<EnumerationResult> {
    let LatentKind::Discrete(m) = model.latent() else {
        return Err(TvoError::Unsupported("enumeration needs discrete latents".into()));
    };
    let states = enumerate_states(m)?;
    let n = states.rows();
    let xs = RealArray::matrix(n, x.len(), x.iter().copied().cycle().take(n * x.len()).collect())?;
    let (log_joint, log_q) = model.log_densities(params, &xs, &states)?;
    let log_evidence = log_sum_exp(&log_joint);
    let posterior = log_joint.iter().map(|lp| (lp - log_evidence).exp()).collect();
    Ok(EnumerationResult { states, log_joint, log_q, log_evidence, posterior })
}

impl EnumerationResult {
    pub fn instantaneous_elbo(&self) -> Vec<f64> {
        self.log_joint.iter().zip(&self.log_q).map(|(p, q)| p - q).collect()
    }

    /// Exact `π_β(z)` over all states.
    pub fn path_weights(&self, beta: f64) -> Result<Vec<f64>> {
        let table = self.table(&[beta])?;
        Ok(table.column(0).to_vec())
    }

    /// Weight table whose columns are the exact path distributions.
    pub fn table(&self, betas: &[f64]) -> Result<WeightTable> {
        WeightTable::with_base(self.instantaneous_elbo(), &self.log_q, betas.to_vec())
    }

    /// `E_{π_β}[f]`.
    pub fn expectation(&self, beta: f64, f: &[f64]) -> Result<f64> {
        self.table(&[beta])?.expectation(0, f)
    }

    /// `g(β) = E_{π_β}[U']`.
    pub fn g(&self, beta: f64) -> Result<f64> {
        self.expectation(beta, &self.instantaneous_elbo())
    }

    /// `Var_{π_β}[U']`.
    pub fn variance(&self, beta: f64) -> Result<f64> {
        let u = self.instantaneous_elbo();
        let w = self.path_weights(beta)?;
        let mean: f64 = w.iter().zip(&u).map(|(w, u)| w * u).sum();
        Ok(w.iter().zip(&u).map(|(w, u)| w * (u - mean).powi(2)).sum())
    }

    /// `Σ_z q(z | x) U'(z)`, summed directly.
    pub fn elbo(&self) -> f64 {
        self.log_q.iter().zip(self.instantaneous_elbo()).map(|(lq, u)| lq.exp() * u).sum()
    }

    /// `Σ_z p(z | x) U'(z)`, summed directly.
    pub fn eubo(&self) -> f64 {
        self.posterior.iter().zip(self.instantaneous_elbo()).map(|(p, u)| p * u).sum()
    }

    /// `Σ_z |q(z | x) − p(z | x)| / 2`.
    pub fn total_variation(&self) -> f64 {
        0.5 * self.log_q.iter().zip(&self.posterior).map(|(lq, p)| (lq.exp() - p).abs()).sum::<f64>()
    }
}

/// Composite trapezoid rule on `points` equally spaced knots over `[0, 1]`.
pub fn trapezoid(mut g: impl FnMut(f64) -> f64, points: usize) -> f64 {
    assert!(points >= 2, "trapezoid rule needs at least two knots");
    let h = 1.0 / (points - 1) as f64;
    let mut total = 0.5 * (g(0.0) + g(1.0));
    for i in 1..points - 1 {
        total += g(i as f64 * h);
    }
    total * h
}

/// `|∫₀¹ g − log p(x)|` by the trapezoid rule on `grid_size` knots.
pub fn ti_identity_check(g: impl FnMut(f64) -> f64, log_evidence: f64, grid_size: usize) -> Result<f64> {
    if grid_size < 2 {
        return Err(TvoError::domain("identity check needs a grid of at least two knots"));
    }
    Ok((trapezoid(g, grid_size) - log_evidence).abs())
}

/// Centered difference `(g(β + h) − g(β − h)) / 2h` next to an exact variance.
pub fn variance_identity_check(
    mut g: impl FnMut(f64) -> f64,
    variance: f64,
    beta: f64,
    h: f64,
) -> Result<(f64, f64)> {
    check_beta(beta)?;
    if !(h > 0.0 && beta - h >= 0.0 && beta + h <= 1.0) {
        return Err(TvoError::domain(format!("need h > 0 and beta in (h, 1 - h), got beta={beta}, h={h}")));
    }
    Ok(((g(beta + h) - g(beta - h)) / (2.0 * h), variance))
}

/// Relative gap used for the variance identity, `|a − b| / max(1, |b|)`.
pub fn identity_gap(fd: f64, exact: f64) -> f64 {
    (fd - exact).abs() / exact.abs().max(1.0)
}

/// Relative error between the tape gradient of `Σ_n (log p(x_n, z_n) − log q(z_n | x_n))`
/// and its central finite difference with step `h`.
pub fn density_gradient_check(model: &dyn LatentModel, params: &ParamVector, x: &RealArray, z: &RealArray, h: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let nodes = model.record(&mut tape, x, LatentRows::Values(z))?;
    let diff = tape.sub(nodes.log_joint, nodes.log_q);
    tape.sum(diff);
    tape.forward(params, &Inputs::new())?;
    let backward = tape.backward()?;
    let fd = finite_difference_gradient(
        |v| {
            let p = params.with_values(v.to_vec())?;
            let (lp, lq) = model.log_densities(&p, x, z)?;
            Ok(lp.iter().zip(&lq).map(|(a, b)| a - b).sum())
        },
        params.values(),
        h,
    )?;
    Ok(relative_error(&backward, &fd))
}

/// Relative error between the covariance gradient of `E_{π_β}[U']` computed by
/// enumeration and the finite difference of the enumerated expectation.
pub fn exact_covariance_check(model: &dyn LatentModel, params: &ParamVector, x: &[f64], beta: f64, h: f64) -> Result<f64> {
    let xs = RealArray::matrix(1, x.len(), x.to_vec())?;
    let cfg = EstimatorConfig::new(EstimatorKind::ExactEnumeration, 0);
    let est = estimate_gradient(model, params, &xs, &[Term::new(beta, 1.0)], Integrand::InstantaneousElbo, cfg, 0)?;
    let fd = finite_difference_gradient(|v| enumerate(model, &params.with_values(v.to_vec())?, x)?.g(beta), params.values(), h)?;
    Ok(relative_error(&est.vector, &fd))
}

/// Both sides of `∇ log Z_β = E_{π_β}[∇ log π̃_β]` for one datum by enumeration:
/// the tape gradient of `log Σ_z p(x, z)^β q(z | x)^{1−β}`, and the
/// π_β-weighted sum of per-state scores.
pub fn normalizer_lemma(model: &dyn LatentModel, params: &ParamVector, x: &[f64], beta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    check_beta(beta)?;
    let LatentKind::Discrete(m) = model.latent() else {
        return Err(TvoError::Unsupported("enumeration needs discrete latents".into()));
    };
    let states = enumerate_states(m)?;
    let n = states.rows();
    let xs = RealArray::matrix(n, x.len(), x.iter().copied().cycle().take(n * x.len()).collect())?;
    let mut tape = Tape::new();
    let nodes = model.record(&mut tape, &xs, LatentRows::Values(&states))?;
    let a = tape.scale(nodes.log_joint, beta);
    let b = tape.scale(nodes.log_q, 1.0 - beta);
    let log_path = tape.add(a, b);
    tape.log_sum_exp(log_path);
    tape.forward(params, &Inputs::new())?;
    let direct = tape.backward()?;
    let w = enumerate(model, params, x)?.path_weights(beta)?;
    let wp: Vec<f64> = w.iter().map(|w| beta * w).collect();
    let wq: Vec<f64> = w.iter().map(|w| (1.0 - beta) * w).collect();
    let expected_score = tape.backward_from(&[(nodes.log_joint, &wp), (nodes.log_q, &wq)])?;
    Ok((direct, expected_score))
}
