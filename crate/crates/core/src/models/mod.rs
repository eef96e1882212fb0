//! Latent-variable models exposing `log p_θ(x, z)`, `log q_φ(z | x)` and
//! samplers for both.

use std::sync::Arc;

use crate::autodiff::{Inputs, NodeId, ParamLayout, ParamVector, RealArray, Tape};
use crate::error::{Result, TvoError};
use crate::rng::Rng;

pub mod checkpoint;
mod gaussian;
mod nn;
mod sbn;
mod toy;
mod vae;

pub use gaussian::{ConjugateGaussian, GaussianMoments};
pub use nn::Mlp;
pub use sbn::{SbnConfig, SigmoidBeliefNet};
pub use toy::ToyBernoulli;
pub use vae::{GaussianVae, VaeConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentKind {
    Discrete(usize),
    Continuous(usize),
}

impl LatentKind {
    pub fn dim(self) -> usize {
        match self {
            LatentKind::Discrete(d) | LatentKind::Continuous(d) => d,
        }
    }
}

/// How the latent rows enter a recorded density computation.
#[derive(Clone, Copy, Debug)]
pub enum LatentRows<'a> {
    /// Fixed latent values, one row per data row.
    Values(&'a RealArray),
    /// Standard-normal noise; the model records `z = μ + σ ε` on the tape.
    Reparam(&'a RealArray),
}

/// Per-row `log p(x, z)` and `log q(z | x)` nodes, each of shape `[rows]`.
#[derive(Clone, Copy, Debug)]
pub struct DensityNodes {
    pub log_joint: NodeId,
    pub log_q: NodeId,
}

pub trait LatentModel: Send + Sync {
    fn name(&self) -> &str;

    fn layout(&self) -> &Arc<ParamLayout>;

    fn latent(&self) -> LatentKind;

    fn data_dim(&self) -> usize;

    /// Fresh parameters drawn from the model's initialization scheme.
    fn init_params(&self, seed: u64) -> ParamVector;

    /// Records per-row log densities for `x: [n, D_x]` and the matching latent rows.
    fn record(&self, tape: &mut Tape, x: &RealArray, z: LatentRows<'_>) -> Result<DensityNodes>;

    /// One draw `z ~ q(· | x_n)` per row of `x`.
    fn sample_q(&self, params: &ParamVector, x: &RealArray, rng: &mut Rng) -> Result<RealArray>;

    /// `n` ancestral draws `(x, z) ~ p(x, z)`.
    fn sample_joint(&self, params: &ParamVector, n: usize, rng: &mut Rng) -> Result<(RealArray, RealArray)>;

    /// Rejects data outside the likelihood's support.
    fn validate_x(&self, x: &RealArray) -> Result<()> {
        if x.cols() != self.data_dim() {
            return Err(TvoError::domain(format!(
                "data rows have {} columns, model expects {}",
                x.cols(),
                self.data_dim()
            )));
        }
        Ok(())
    }

    fn supports_reparam(&self) -> bool {
        false
    }

    /// Draws `z` by reparameterization from noise `eps` (continuous q only).
    fn reparam_sample(&self, _params: &ParamVector, _x: &RealArray, _eps: &RealArray) -> Result<RealArray> {
        Err(TvoError::Unsupported(format!("{} has no reparameterizable q", self.name())))
    }

    /// Values of `log p(x_n, z_n)` and `log q(z_n | x_n)` for every row.
    fn log_densities(&self, params: &ParamVector, x: &RealArray, z: &RealArray) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let nodes = self.record(&mut tape, x, LatentRows::Values(z))?;
        tape.evaluate(params, &Inputs::new())?;
        Ok((
            tape.value(nodes.log_joint)?.data().to_vec(),
            tape.value(nodes.log_q)?.data().to_vec(),
        ))
    }

    fn log_joint(&self, params: &ParamVector, x: &[f64], z: &[f64]) -> Result<f64> {
        let (lp, _) = self.log_densities(params, &single_row(x), &single_row(z))?;
        Ok(lp[0])
    }

    fn log_q(&self, params: &ParamVector, x: &[f64], z: &[f64]) -> Result<f64> {
        let (_, lq) = self.log_densities(params, &single_row(x), &single_row(z))?;
        Ok(lq[0])
    }
}

pub(crate) fn single_row(v: &[f64]) -> RealArray {
    RealArray::matrix(1, v.len(), v.to_vec()).expect("non-empty row")
}

/// Repeats every row of `x` `times` times consecutively.
pub fn repeat_rows(x: &RealArray, times: usize) -> RealArray {
    let c = x.cols();
    let mut data = Vec::with_capacity(x.rows() * times * c);
    for r in 0..x.rows() {
        for _ in 0..times {
            data.extend_from_slice(x.row(r));
        }
    }
    RealArray::matrix(x.rows() * times, c, data).expect("non-empty")
}

pub(crate) fn check_binary(x: &RealArray) -> Result<()> {
    if let Some(bad) = x.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(TvoError::domain(format!("Bernoulli likelihood needs binary data, found {bad}")));
    }
    Ok(())
}

/// `±1` signs `2x − 1` as a constant node.
pub(crate) fn sign_node(tape: &mut Tape, x: &RealArray) -> NodeId {
    let data = x.data().iter().map(|&v| 2.0 * v - 1.0).collect();
    tape.constant(RealArray::new(x.shape().to_vec(), data).expect("same shape"))
}

/// Per-row Bernoulli log-likelihood `Σ_d log σ((2x_d − 1) · logit_d)`.
pub(crate) fn bernoulli_log_prob(tape: &mut Tape, logits: NodeId, x: &RealArray) -> NodeId {
    let signs = sign_node(tape, x);
    let signed = tape.mul(logits, signs);
    let lp = tape.log_sigmoid(signed);
    tape.sum_cols(lp)
}

/// Per-row diagonal Gaussian log-density of `z` with mean `mu` and log-std `log_std`.
pub(crate) fn gaussian_log_prob(tape: &mut Tape, z: NodeId, mu: NodeId, log_std: NodeId) -> NodeId {
    let diff = tape.sub(z, mu);
    let sq = tape.mul(diff, diff);
    let neg2 = tape.scale(log_std, -2.0);
    let inv_var = tape.exp(neg2);
    let scaled = tape.mul(sq, inv_var);
    let quad = tape.scale(scaled, -0.5);
    let t = tape.sub(quad, log_std);
    let t = tape.offset(t, -0.5 * (2.0 * std::f64::consts::PI).ln());
    tape.sum_cols(t)
}

/// Bernoulli draws from logit rows.
pub(crate) fn sample_bernoulli(logits: &RealArray, rng: &mut Rng) -> RealArray {
    use rand::Rng as _;
    let data = logits
        .data()
        .iter()
        .map(|&l| if rng.random::<f64>() < crate::autodiff::sigmoid(l) { 1.0 } else { 0.0 })
        .collect();
    RealArray::new(logits.shape().to_vec(), data).expect("same shape")
}

pub(crate) fn standard_normal(rows: usize, cols: usize, rng: &mut Rng) -> RealArray {
    use rand_distr::{Distribution, StandardNormal};
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    RealArray::matrix(rows, cols, data).expect("non-empty")
}
