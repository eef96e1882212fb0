use std::f64::consts::PI;
use std::sync::Arc;

use rand_distr::{Distribution, Normal};

use super::{gaussian_log_prob, DensityNodes, LatentKind, LatentModel, LatentRows};
use crate::autodiff::{NodeId, ParamLayout, ParamVector, RealArray, Tape};
use crate::error::{Result, TvoError};
use crate::rng::{self, Rng};

/// Scalar conjugate model with closed-form evidence and path moments.
///
/// `p(z) = N(μ₀, σ₀²)`, `p(x | z) = N(z, σ²)`, `q(z | x) = N(a·x + b, s²)`.
/// Learnable: `theta/prior_mean` (μ₀), `phi/slope` (a), `phi/bias` (b),
/// `phi/log_std` (log s). The standard deviations σ₀ and σ are fixed.
///
/// Every `π_β` is Gaussian: its precision and precision-weighted mean
/// interpolate linearly in β between those of `q` and of the posterior.
#[derive(Clone, Debug)]
pub struct ConjugateGaussian {
    prior_std: f64,
    noise_std: f64,
    layout: Arc<ParamLayout>,
}

/// Closed-form quantities at one `(params, x)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianMoments {
    pub prior_mean: f64,
    pub q_mean: f64,
    pub q_var: f64,
    /// `U'(z) = A z² + B z + C`
    pub quad: [f64; 3],
}

const SEGMENTS: [&str; 4] = ["theta/prior_mean", "phi/slope", "phi/bias", "phi/log_std"];

impl ConjugateGaussian {
    pub fn new(prior_std: f64, noise_std: f64) -> Result<Self> {
        if !(prior_std > 0.0 && noise_std > 0.0) {
            return Err(TvoError::domain("standard deviations must be positive"));
        }
        let layout = ParamLayout::new(SEGMENTS.iter().map(|s| (*s, vec![1])))?;
        Ok(Self { prior_std, noise_std, layout: Arc::new(layout) })
    }

    pub fn prior_std(&self) -> f64 {
        self.prior_std
    }

    pub fn noise_std(&self) -> f64 {
        self.noise_std
    }

    /// `(μ₀, a, b, log s)` in layout order.
    pub fn params(&self, prior_mean: f64, slope: f64, bias: f64, log_std: f64) -> ParamVector {
        ParamVector::from_values(self.layout.clone(), vec![prior_mean, slope, bias, log_std]).expect("four values")
    }

    fn unpack(params: &ParamVector) -> [f64; 4] {
        let v = params.values();
        [v[0], v[1], v[2], v[3]]
    }

    /// Random instance: `(σ₀, σ)` in `[0.5, 2]`, parameters and a datum `x`.
    pub fn random_instance(seed: u64) -> (Self, ParamVector, f64) {
        use rand::Rng as _;
        let mut r = rng::rng(seed);
        let model = Self::new(r.random_range(0.5..2.0), r.random_range(0.5..2.0)).expect("positive");
        let params = model.params(
            r.random_range(-1.0..1.0),
            r.random_range(-0.5..1.5),
            r.random_range(-1.0..1.0),
            r.random_range(-1.0..0.5),
        );
        let x = r.random_range(-2.0..2.0);
        (model, params, x)
    }

    /// Posterior `(mean, variance)` of `z` given `x`.
    pub fn posterior(&self, params: &ParamVector, x: f64) -> (f64, f64) {
        let [mu0, ..] = Self::unpack(params);
        let (v0, v) = (self.prior_std.powi(2), self.noise_std.powi(2));
        let prec = 1.0 / v0 + 1.0 / v;
        ((mu0 / v0 + x / v) / prec, 1.0 / prec)
    }

    /// Parameters whose `q(z | x)` equals the posterior for every `x`.
    pub fn posterior_matched(&self, params: &ParamVector) -> ParamVector {
        let [mu0, ..] = Self::unpack(params);
        let (v0, v) = (self.prior_std.powi(2), self.noise_std.powi(2));
        let slope = v0 / (v0 + v);
        let bias = mu0 * v / (v0 + v);
        let var = v0 * v / (v0 + v);
        self.params(mu0, slope, bias, 0.5 * var.ln())
    }

    pub fn moments(&self, params: &ParamVector, x: f64) -> GaussianMoments {
        let [mu0, a, b, log_s] = Self::unpack(params);
        let (v0, v) = (self.prior_std.powi(2), self.noise_std.powi(2));
        let m = a * x + b;
        let s2 = (2.0 * log_s).exp();
        let a2 = -0.5 / v0 - 0.5 / v + 0.5 / s2;
        let b1 = mu0 / v0 + x / v - m / s2;
        let cp = -0.5 * (2.0 * PI * v0).ln() - 0.5 * (2.0 * PI * v).ln();
        let cq = -0.5 * (2.0 * PI * s2).ln();
        let c0 = -mu0 * mu0 / (2.0 * v0) - x * x / (2.0 * v) + m * m / (2.0 * s2) + cp - cq;
        GaussianMoments { prior_mean: mu0, q_mean: m, q_var: s2, quad: [a2, b1, c0] }
    }

    /// Mean and variance of `π_β`.
    pub fn path_distribution(&self, params: &ParamVector, x: f64, beta: f64) -> (f64, f64) {
        let mo = self.moments(params, x);
        let [a2, b1, _] = mo.quad;
        let prec = 1.0 / mo.q_var - 2.0 * beta * a2;
        let lin = mo.q_mean / mo.q_var + beta * b1;
        (lin / prec, 1.0 / prec)
    }

    /// `U'(z) = log p(x, z) − log q(z | x)`.
    pub fn instantaneous_elbo(&self, params: &ParamVector, x: f64, z: f64) -> f64 {
        let [a2, b1, c0] = self.moments(params, x).quad;
        a2 * z * z + b1 * z + c0
    }

    /// `g(β) = E_{π_β}[U']`.
    pub fn analytic_g(&self, params: &ParamVector, x: f64, beta: f64) -> f64 {
        let [a2, b1, c0] = self.moments(params, x).quad;
        let (mean, var) = self.path_distribution(params, x, beta);
        a2 * (mean * mean + var) + b1 * mean + c0
    }

    /// `Var_{π_β}[U']`.
    pub fn analytic_variance(&self, params: &ParamVector, x: f64, beta: f64) -> f64 {
        let [a2, b1, _] = self.moments(params, x).quad;
        let (mean, var) = self.path_distribution(params, x, beta);
        let lin = 2.0 * a2 * mean + b1;
        2.0 * a2 * a2 * var * var + lin * lin * var
    }

    pub fn analytic_log_evidence(&self, params: &ParamVector, x: f64) -> f64 {
        let [mu0, ..] = Self::unpack(params);
        let var = self.prior_std.powi(2) + self.noise_std.powi(2);
        -0.5 * (2.0 * PI * var).ln() - (x - mu0).powi(2) / (2.0 * var)
    }

    pub fn kl_q_to_posterior(&self, params: &ParamVector, x: f64) -> f64 {
        let mo = self.moments(params, x);
        let (pm, pv) = self.posterior(params, x);
        kl_normal(mo.q_mean, mo.q_var, pm, pv)
    }

    pub fn kl_posterior_to_q(&self, params: &ParamVector, x: f64) -> f64 {
        let mo = self.moments(params, x);
        let (pm, pv) = self.posterior(params, x);
        kl_normal(pm, pv, mo.q_mean, mo.q_var)
    }

    /// `ELBO = E_q[log p(x, z)] + H[q]`.
    pub fn analytic_elbo(&self, params: &ParamVector, x: f64) -> f64 {
        let mo = self.moments(params, x);
        let (v0, v) = (self.prior_std.powi(2), self.noise_std.powi(2));
        let (m, s2, mu0) = (mo.q_mean, mo.q_var, mo.prior_mean);
        let cp = -0.5 * (2.0 * PI * v0).ln() - 0.5 * (2.0 * PI * v).ln();
        cp - ((m - mu0).powi(2) + s2) / (2.0 * v0) - ((x - m).powi(2) + s2) / (2.0 * v)
            + 0.5 * (2.0 * PI * std::f64::consts::E * s2).ln()
    }

    /// Gradient of the ELBO in layout order `(μ₀, a, b, log s)`.
    pub fn analytic_elbo_gradient(&self, params: &ParamVector, x: f64) -> Vec<f64> {
        let mo = self.moments(params, x);
        let (v0, v) = (self.prior_std.powi(2), self.noise_std.powi(2));
        let (m, s2, mu0) = (mo.q_mean, mo.q_var, mo.prior_mean);
        let d_m = -(m - mu0) / v0 + (x - m) / v;
        vec![(m - mu0) / v0, d_m * x, d_m, 1.0 - s2 * (1.0 / v0 + 1.0 / v)]
    }

    /// `E_{p(x,z)}[−log q(z | x)]`, the inference-compilation loss.
    pub fn analytic_cross_entropy(&self, params: &ParamVector) -> f64 {
        let [mu0, a, b, log_s] = Self::unpack(params);
        let (v0, v) = (self.prior_std.powi(2), self.noise_std.powi(2));
        let resid_mean = (1.0 - a) * mu0 - b;
        let sq = resid_mean.powi(2) + (1.0 - a).powi(2) * v0 + a * a * v;
        0.5 * (2.0 * PI).ln() + log_s + sq / (2.0 * (2.0 * log_s).exp())
    }

    /// Gradient of [`Self::analytic_cross_entropy`] in layout order (zero for μ₀
    /// since the generative side is held fixed).
    pub fn analytic_cross_entropy_gradient(&self, params: &ParamVector) -> Vec<f64> {
        let [mu0, a, b, log_s] = Self::unpack(params);
        let (v0, v) = (self.prior_std.powi(2), self.noise_std.powi(2));
        let s2 = (2.0 * log_s).exp();
        let resid_mean = (1.0 - a) * mu0 - b;
        let sq = resid_mean.powi(2) + (1.0 - a).powi(2) * v0 + a * a * v;
        let d_a = (-2.0 * resid_mean * mu0 - 2.0 * (1.0 - a) * v0 + 2.0 * a * v) / (2.0 * s2);
        let d_b = -resid_mean / s2;
        vec![0.0, d_a, d_b, 1.0 - sq / s2]
    }

    fn broadcast_param(tape: &mut Tape, name: &str, rows: usize) -> NodeId {
        let p = tape.param(name);
        tape.broadcast_rows(p, rows)
    }

    fn q_nodes(&self, tape: &mut Tape, x: &RealArray) -> (NodeId, NodeId) {
        let n = x.rows();
        let xs = tape.constant(x.clone());
        let a = Self::broadcast_param(tape, "phi/slope", n);
        let b = Self::broadcast_param(tape, "phi/bias", n);
        let ax = tape.mul(a, xs);
        let mean = tape.add(ax, b);
        let log_s = Self::broadcast_param(tape, "phi/log_std", n);
        (mean, log_s)
    }
}

fn kl_normal(m1: f64, v1: f64, m2: f64, v2: f64) -> f64 {
    0.5 * ((v2 / v1).ln() + (v1 + (m1 - m2).powi(2)) / v2 - 1.0)
}

impl LatentModel for ConjugateGaussian {
    fn name(&self) -> &str {
        "gaussian"
    }

    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn latent(&self) -> LatentKind {
        LatentKind::Continuous(1)
    }

    fn data_dim(&self) -> usize {
        1
    }

    fn init_params(&self, _seed: u64) -> ParamVector {
        self.params(0.0, 0.0, 0.0, 0.0)
    }

    fn supports_reparam(&self) -> bool {
        true
    }

    fn record(&self, tape: &mut Tape, x: &RealArray, z: LatentRows<'_>) -> Result<DensityNodes> {
        self.validate_x(x)?;
        let n = x.rows();
        let (mean, log_s) = self.q_nodes(tape, x);
        let z = match z {
            LatentRows::Values(z) => {
                if z.rows() != n || z.cols() != 1 {
                    return Err(TvoError::domain(format!("latent rows must be [{n}, 1], got {:?}", z.shape())));
                }
                tape.constant(z.clone())
            }
            LatentRows::Reparam(eps) => {
                let e = tape.constant(eps.clone());
                let s = tape.exp(log_s);
                let se = tape.mul(s, e);
                tape.add(mean, se)
            }
        };
        let log_q = gaussian_log_prob(tape, z, mean, log_s);

        let mu0 = Self::broadcast_param(tape, "theta/prior_mean", n);
        let prior_log_std = tape.constant(RealArray::matrix(n, 1, vec![self.prior_std.ln(); n])?);
        let lp_z = gaussian_log_prob(tape, z, mu0, prior_log_std);
        let xs = tape.constant(x.clone());
        let noise_log_std = tape.constant(RealArray::matrix(n, 1, vec![self.noise_std.ln(); n])?);
        let lp_x = gaussian_log_prob(tape, xs, z, noise_log_std);
        let log_joint = tape.add(lp_z, lp_x);
        Ok(DensityNodes { log_joint, log_q })
    }

    fn sample_q(&self, params: &ParamVector, x: &RealArray, rng: &mut Rng) -> Result<RealArray> {
        let eps = super::standard_normal(x.rows(), 1, rng);
        self.reparam_sample(params, x, &eps)
    }

    fn reparam_sample(&self, params: &ParamVector, x: &RealArray, eps: &RealArray) -> Result<RealArray> {
        self.validate_x(x)?;
        let [_, a, b, log_s] = Self::unpack(params);
        let s = log_s.exp();
        let data = x.data().iter().zip(eps.data()).map(|(&xi, &e)| a * xi + b + s * e).collect();
        RealArray::matrix(x.rows(), 1, data)
    }

    fn sample_joint(&self, params: &ParamVector, n: usize, rng: &mut Rng) -> Result<(RealArray, RealArray)> {
        let [mu0, ..] = Self::unpack(params);
        let prior = Normal::new(mu0, self.prior_std).map_err(|e| TvoError::domain(e.to_string()))?;
        let noise = Normal::new(0.0, self.noise_std).map_err(|e| TvoError::domain(e.to_string()))?;
        let z: Vec<f64> = (0..n).map(|_| prior.sample(rng)).collect();
        let x: Vec<f64> = z.iter().map(|&zi| zi + noise.sample(rng)).collect();
        Ok((RealArray::matrix(n, 1, x)?, RealArray::matrix(n, 1, z)?))
    }
}

impl ConjugateGaussian {
    /// Value of `log q(z | x)` for a single scalar pair (test convenience).
    pub fn log_q_scalar(&self, params: &ParamVector, x: f64, z: f64) -> Result<f64> {
        self.log_q(params, &[x], &[z])
    }
}
