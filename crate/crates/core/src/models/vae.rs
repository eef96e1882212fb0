use std::sync::Arc;

use super::nn::Mlp;
use super::{
    bernoulli_log_prob, check_binary, gaussian_log_prob, sample_bernoulli, standard_normal, DensityNodes, LatentKind,
    LatentModel, LatentRows,
};
use crate::autodiff::{NodeId, ParamLayout, ParamVector, RealArray, Tape};
use crate::error::{Result, TvoError};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct VaeConfig {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
}

/// Continuous-latent model: `p(z) = N(0, I)`, `p(x | z) = Bern(σ(dec(z)))`,
/// `q(z | x) = N(μ(h), diag(exp(ℓ(h))²))` where `h` is a two-layer tanh trunk
/// and `μ`, `ℓ` are separate linear heads.
#[derive(Clone, Debug)]
pub struct GaussianVae {
    config: VaeConfig,
    decoder: Mlp,
    trunk: Mlp,
    mean_head: Mlp,
    log_std_head: Mlp,
    layout: Arc<ParamLayout>,
}

impl GaussianVae {
    pub fn new(config: VaeConfig) -> Result<Self> {
        let VaeConfig { data_dim, latent_dim, hidden } = config;
        if data_dim == 0 || latent_dim == 0 || hidden == 0 {
            return Err(TvoError::domain("VAE dimensions must be positive"));
        }
        let decoder = Mlp::new("theta/decoder", vec![latent_dim, hidden, hidden, data_dim]);
        let trunk = Mlp::new("phi/encoder", vec![data_dim, hidden, hidden]);
        let mean_head = Mlp::linear("phi/mean", hidden, latent_dim);
        let log_std_head = Mlp::linear("phi/log_std", hidden, latent_dim);
        let specs: Vec<_> = [&decoder, &trunk, &mean_head, &log_std_head]
            .iter()
            .flat_map(|m| m.segments())
            .collect();
        let layout = Arc::new(ParamLayout::new(specs)?);
        Ok(Self { config, decoder, trunk, mean_head, log_std_head, layout })
    }

    pub fn config(&self) -> &VaeConfig {
        &self.config
    }

    fn record_q(&self, tape: &mut Tape, x: &RealArray) -> (NodeId, NodeId) {
        let n = x.rows();
        let input = tape.constant(x.clone());
        let h = self.trunk.record(tape, input, n);
        let h = tape.tanh(h);
        (self.mean_head.record(tape, h, n), self.log_std_head.record(tape, h, n))
    }

    /// Encoder mean and log-std rows for `x`.
    pub fn encode(&self, params: &ParamVector, x: &RealArray) -> Result<(RealArray, RealArray)> {
        let mut h = self.trunk.apply(params, x)?;
        h.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        Ok((self.mean_head.apply(params, &h)?, self.log_std_head.apply(params, &h)?))
    }
}

impl LatentModel for GaussianVae {
    fn name(&self) -> &str {
        "vae"
    }

    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn latent(&self) -> LatentKind {
        LatentKind::Continuous(self.config.latent_dim)
    }

    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn init_params(&self, seed: u64) -> ParamVector {
        let mut params = ParamVector::zeros(self.layout.clone());
        let mut rng = rng::rng(seed);
        for m in [&self.decoder, &self.trunk, &self.mean_head, &self.log_std_head] {
            m.init(&mut params, &mut rng).expect("segments exist");
        }
        params
    }

    fn validate_x(&self, x: &RealArray) -> Result<()> {
        if x.cols() != self.config.data_dim {
            return Err(TvoError::domain(format!(
                "expected {} data columns, got {}",
                self.config.data_dim,
                x.cols()
            )));
        }
        check_binary(x)
    }

    fn supports_reparam(&self) -> bool {
        true
    }

    fn record(&self, tape: &mut Tape, x: &RealArray, z: LatentRows<'_>) -> Result<DensityNodes> {
        self.validate_x(x)?;
        let n = x.rows();
        let dz = self.config.latent_dim;
        let rows = match z {
            LatentRows::Values(a) | LatentRows::Reparam(a) => a,
        };
        if rows.rows() != n || rows.cols() != dz {
            return Err(TvoError::domain(format!("latent rows must be [{n}, {dz}], got {:?}", rows.shape())));
        }
        let (mean, log_std) = self.record_q(tape, x);
        let z = match z {
            LatentRows::Values(z) => tape.constant(z.clone()),
            LatentRows::Reparam(eps) => {
                let e = tape.constant(eps.clone());
                let s = tape.exp(log_std);
                let se = tape.mul(s, e);
                tape.add(mean, se)
            }
        };
        let log_q = gaussian_log_prob(tape, z, mean, log_std);

        let zero = tape.constant(RealArray::zeros(vec![n, dz]));
        let lp_z = gaussian_log_prob(tape, z, zero, zero);
        let logits = self.decoder.record(tape, z, n);
        let lp_x = bernoulli_log_prob(tape, logits, x);
        let log_joint = tape.add(lp_z, lp_x);
        Ok(DensityNodes { log_joint, log_q })
    }

    fn sample_q(&self, params: &ParamVector, x: &RealArray, rng: &mut Rng) -> Result<RealArray> {
        let eps = standard_normal(x.rows(), self.config.latent_dim, rng);
        self.reparam_sample(params, x, &eps)
    }

    fn reparam_sample(&self, params: &ParamVector, x: &RealArray, eps: &RealArray) -> Result<RealArray> {
        self.validate_x(x)?;
        let (mean, log_std) = self.encode(params, x)?;
        let data = mean
            .data()
            .iter()
            .zip(log_std.data())
            .zip(eps.data())
            .map(|((m, l), e)| m + l.exp() * e)
            .collect();
        RealArray::matrix(x.rows(), self.config.latent_dim, data)
    }

    fn sample_joint(&self, params: &ParamVector, n: usize, rng: &mut Rng) -> Result<(RealArray, RealArray)> {
        let z = standard_normal(n, self.config.latent_dim, rng);
        let logits = self.decoder.apply(params, &z)?;
        Ok((sample_bernoulli(&logits, rng), z))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn small() -> GaussianVae {
        GaussianVae::new(VaeConfig { data_dim: 6, latent_dim: 3, hidden: 4 }).unwrap()
    }

    #[test]
    fn log_q_at_encoder_mean() {
        let m = small();
        let params = m.init_params(3);
        let x = RealArray::matrix(1, 6, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        let (mean, log_std) = m.encode(&params, &x).unwrap();
        let (_, lq) = m.log_densities(&params, &x, &mean).unwrap();
        let expect: f64 = log_std.data().iter().map(|l| -0.5 * (2.0 * PI).ln() - l).sum();
        assert!((lq[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn reparam_recording_matches_values() {
        let m = small();
        let params = m.init_params(8);
        let mut r = rng::rng(2);
        let x = RealArray::matrix(2, 6, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap();
        let eps = standard_normal(2, 3, &mut r);
        let z = m.reparam_sample(&params, &x, &eps).unwrap();
        let (lp, lq) = m.log_densities(&params, &x, &z).unwrap();
        let mut tape = Tape::new();
        let nodes = m.record(&mut tape, &x, LatentRows::Reparam(&eps)).unwrap();
        tape.evaluate(&params, &Default::default()).unwrap();
        let lp2 = tape.value(nodes.log_joint).unwrap().data().to_vec();
        let lq2 = tape.value(nodes.log_q).unwrap().data().to_vec();
        for i in 0..2 {
            assert!((lp[i] - lp2[i]).abs() < 1e-12);
            assert!((lq[i] - lq2[i]).abs() < 1e-12);
            assert!(lp[i].is_finite() && lq[i].is_finite());
        }
    }
}
