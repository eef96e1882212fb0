use std::sync::Arc;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::{check_binary, DensityNodes, LatentKind, LatentModel, LatentRows};
use crate::autodiff::{log_sum_exp, sigmoid, ParamLayout, ParamVector, RealArray, Tape};
use crate::error::{Result, TvoError};
use crate::rng::{self, Rng};

pub const MAX_LATENTS: usize = 12;
pub const MAX_DATA_DIM: usize = 8;

/// Small binary model whose `2^M` latent states can be enumerated.
///
/// - `p(z)` is a full distribution over `{0,1}^M` written autoregressively:
///   `theta/prior` holds one logit per prefix `z_{<j}` (`2^M − 1` logits).
/// - `p(x | z)` is factorized Bernoulli with a free logit row per latent
///   state (`theta/likelihood`, `[2^M, D_x]`).
/// - `q(z | x)` is autoregressive like the prior, with a separate prefix
///   table for every data state (`phi/q`, `[2^D_x, 2^M − 1]`), so it can
///   represent any posterior exactly.
///
/// Bit `j` of a state index is `z_j`; prefixes are little-endian.
#[derive(Clone, Debug)]
pub struct ToyBernoulli {
    latents: usize,
    data_dim: usize,
    layout: Arc<ParamLayout>,
}

impl ToyBernoulli {
    pub fn new(latents: usize, data_dim: usize) -> Result<Self> {
        if latents == 0 || latents > MAX_LATENTS {
            return Err(TvoError::domain(format!("toy model needs 1..={MAX_LATENTS} latents, got {latents}")));
        }
        if data_dim == 0 || data_dim > MAX_DATA_DIM {
            return Err(TvoError::domain(format!("toy model needs 1..={MAX_DATA_DIM} data dims, got {data_dim}")));
        }
        let prefixes = (1usize << latents) - 1;
        let layout = ParamLayout::new([
            ("theta/prior", vec![prefixes]),
            ("theta/likelihood", vec![1 << latents, data_dim]),
            ("phi/q", vec![1 << data_dim, prefixes]),
        ])?;
        Ok(Self { latents, data_dim, layout: Arc::new(layout) })
    }

    pub fn latents(&self) -> usize {
        self.latents
    }

    pub fn states(&self) -> usize {
        1 << self.latents
    }

    /// Latent bits of state `index`.
    pub fn state_bits(&self, index: usize) -> Vec<f64> {
        (0..self.latents).map(|j| ((index >> j) & 1) as f64).collect()
    }

    pub fn data_bits(&self, index: usize) -> Vec<f64> {
        (0..self.data_dim).map(|j| ((index >> j) & 1) as f64).collect()
    }

    pub fn state_index(bits: &[f64]) -> usize {
        bits.iter().enumerate().map(|(j, &b)| (b as usize & 1) << j).sum()
    }

    fn prefix_slot(j: usize, prefix: usize) -> usize {
        (1 << j) - 1 + prefix
    }

    /// Parameters with every logit drawn from `N(0, scale²)`.
    pub fn random_params(&self, scale: f64, seed: u64) -> ParamVector {
        let mut rng = rng::rng(seed);
        let normal = Normal::new(0.0, scale).expect("positive scale");
        let values = (0..self.layout.dim()).map(|_| normal.sample(&mut rng)).collect();
        ParamVector::from_values(self.layout.clone(), values).expect("layout dim")
    }

    /// Copy of `params` whose `q(z | x)` equals the exact posterior for every `x`.
    pub fn posterior_matched(&self, params: &ParamVector) -> Result<ParamVector> {
        let mut out = params.clone();
        let prefixes = self.states() - 1;
        for xi in 0..(1 << self.data_dim) {
            let x = self.data_bits(xi);
            let log_joint: Vec<f64> = (0..self.states())
                .map(|s| self.log_joint_direct(params, &x, s))
                .collect::<Result<_>>()?;
            let q = out.segment_mut("phi/q")?;
            for j in 0..self.latents {
                for prefix in 0..(1usize << j) {
                    // states sharing the prefix, split by bit j
                    let (mut ones, mut zeros) = (Vec::new(), Vec::new());
                    for (s, &lj) in log_joint.iter().enumerate() {
                        if s & ((1 << j) - 1) == prefix {
                            if (s >> j) & 1 == 1 {
                                ones.push(lj);
                            } else {
                                zeros.push(lj);
                            }
                        }
                    }
                    q[xi * prefixes + Self::prefix_slot(j, prefix)] = log_sum_exp(&ones) - log_sum_exp(&zeros);
                }
            }
        }
        Ok(out)
    }

    fn log_joint_direct(&self, params: &ParamVector, x: &[f64], state: usize) -> Result<f64> {
        let prior = params.segment("theta/prior")?;
        let lik = params.segment("theta/likelihood")?;
        let mut lp = 0.0;
        for j in 0..self.latents {
            let l = prior[Self::prefix_slot(j, state & ((1 << j) - 1))];
            let bit = (state >> j) & 1;
            lp += crate::autodiff::log_sigmoid(if bit == 1 { l } else { -l });
        }
        for (d, &xd) in x.iter().enumerate() {
            let l = lik[state * self.data_dim + d];
            lp += crate::autodiff::log_sigmoid(if xd == 1.0 { l } else { -l });
        }
        Ok(lp)
    }

    fn sample_autoregressive(table: &[f64], latents: usize, rng: &mut Rng) -> Vec<f64> {
        let mut state = 0usize;
        for j in 0..latents {
            let l = table[Self::prefix_slot(j, state)];
            if rng.random::<f64>() < sigmoid(l) {
                state |= 1 << j;
            }
        }
        (0..latents).map(|j| ((state >> j) & 1) as f64).collect()
    }
}

impl LatentModel for ToyBernoulli {
    fn name(&self) -> &str {
        "toy"
    }

    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn latent(&self) -> LatentKind {
        LatentKind::Discrete(self.latents)
    }

    fn data_dim(&self) -> usize {
        self.data_dim
    }

    fn init_params(&self, seed: u64) -> ParamVector {
        self.random_params(0.1, seed)
    }

    fn validate_x(&self, x: &RealArray) -> Result<()> {
        if x.cols() != self.data_dim {
            return Err(TvoError::domain(format!("expected {} data columns, got {}", self.data_dim, x.cols())));
        }
        check_binary(x)
    }

    fn record(&self, tape: &mut Tape, x: &RealArray, z: LatentRows<'_>) -> Result<DensityNodes> {
        let LatentRows::Values(z) = z else {
            return Err(TvoError::Unsupported("toy model latents are discrete".into()));
        };
        self.validate_x(x)?;
        check_binary(z)?;
        let n = x.rows();
        let m = self.latents;
        if z.rows() != n || z.cols() != m {
            return Err(TvoError::domain(format!("latent rows must be [{n}, {m}], got {:?}", z.shape())));
        }
        let prefixes = self.states() - 1;
        let mut prior_idx = Vec::with_capacity(n * m);
        let mut q_idx = Vec::with_capacity(n * m);
        let mut state_idx = Vec::with_capacity(n);
        for r in 0..n {
            let state = Self::state_index(z.row(r));
            let xi = Self::state_index(x.row(r));
            for j in 0..m {
                let slot = Self::prefix_slot(j, state & ((1 << j) - 1));
                prior_idx.push(slot);
                q_idx.push(xi * prefixes + slot);
            }
            state_idx.push(state);
        }
        let z_signs = super::sign_node(tape, z);

        let prior = tape.param("theta/prior");
        let prior_logits = tape.gather(prior, prior_idx);
        let prior_logits = tape.reshape(prior_logits, vec![n, m]);
        let signed = tape.mul(prior_logits, z_signs);
        let lp_z = tape.log_sigmoid(signed);
        let lp_z = tape.sum_cols(lp_z);

        let lik = tape.param("theta/likelihood");
        let lik_logits = tape.gather_rows(lik, state_idx);
        let lp_x = super::bernoulli_log_prob(tape, lik_logits, x);
        let log_joint = tape.add(lp_z, lp_x);

        let q = tape.param("phi/q");
        let q_logits = tape.gather(q, q_idx);
        let q_logits = tape.reshape(q_logits, vec![n, m]);
        let signed = tape.mul(q_logits, z_signs);
        let lq = tape.log_sigmoid(signed);
        let log_q = tape.sum_cols(lq);
        Ok(DensityNodes { log_joint, log_q })
    }

    fn sample_q(&self, params: &ParamVector, x: &RealArray, rng: &mut Rng) -> Result<RealArray> {
        self.validate_x(x)?;
        let q = params.segment("phi/q")?;
        let prefixes = self.states() - 1;
        let rows: Vec<Vec<f64>> = (0..x.rows())
            .map(|r| {
                let xi = Self::state_index(x.row(r));
                Self::sample_autoregressive(&q[xi * prefixes..(xi + 1) * prefixes], self.latents, rng)
            })
            .collect();
        RealArray::from_rows(&rows)
    }

    fn sample_joint(&self, params: &ParamVector, n: usize, rng: &mut Rng) -> Result<(RealArray, RealArray)> {
        let prior = params.segment("theta/prior")?;
        let lik = params.segment("theta/likelihood")?;
        let mut xs = Vec::with_capacity(n);
        let mut zs = Vec::with_capacity(n);
        for _ in 0..n {
            let z = Self::sample_autoregressive(prior, self.latents, rng);
            let s = Self::state_index(&z);
            let x: Vec<f64> = (0..self.data_dim)
                .map(|d| if rng.random::<f64>() < sigmoid(lik[s * self.data_dim + d]) { 1.0 } else { 0.0 })
                .collect();
            xs.push(x);
            zs.push(z);
        }
        Ok((RealArray::from_rows(&xs)?, RealArray::from_rows(&zs)?))
    }
}
