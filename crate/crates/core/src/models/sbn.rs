use std::sync::Arc;

use super::nn::Mlp;
use super::{bernoulli_log_prob, check_binary, sample_bernoulli, DensityNodes, LatentKind, LatentModel, LatentRows};
use crate::autodiff::{logit, NodeId, ParamLayout, ParamVector, RealArray, Tape};
use crate::error::{Result, TvoError};
use crate::rng::{self, Rng};

/// Architecture of a [`SigmoidBeliefNet`].
#[derive(Clone, Debug, PartialEq)]
pub struct SbnConfig {
    pub data_dim: usize,
    /// Units per stochastic layer.
    pub latent_dim: usize,
    pub layers: usize,
    /// Three-layer tanh MLPs instead of linear maps.
    pub nonlinear: bool,
}

impl SbnConfig {
    pub fn desk(data_dim: usize) -> Self {
        Self { data_dim, latent_dim: 20, layers: 2, nonlinear: false }
    }
}

/// Layered sigmoid belief network with a bottom-up factorized inference network.
///
/// Generative side, top-down:
/// `p(z_L) = Bern(σ(b_L))`, `p(z_ℓ | z_{ℓ+1}) = Bern(σ(dec_ℓ(2z_{ℓ+1} − 1)))`,
/// `p(x | z_1) = Bern(σ(dec_x(2z_1 − 1) + x̃))`.
/// Inference side, bottom-up:
/// `q(z_1 | x) = Bern(σ(enc_1((x − x̄ + 1) / 2)))`, `q(z_ℓ | z_{ℓ−1}) = Bern(σ(enc_ℓ(2z_{ℓ−1} − 1)))`.
///
/// `x̄` is the training-set pixel mean and `x̃ = logit(x̄)` with `x̄` clamped
/// to `[1/D_x, 1 − 1/D_x]`. Latent rows are the layers concatenated,
/// `[z_1 | … | z_L]`.
#[derive(Clone, Debug)]
pub struct SigmoidBeliefNet {
    config: SbnConfig,
    data_mean: Vec<f64>,
    output_bias: Vec<f64>,
    decoders: Vec<Mlp>,
    encoders: Vec<Mlp>,
    layout: Arc<ParamLayout>,
}

impl SigmoidBeliefNet {
    pub fn new(config: SbnConfig) -> Result<Self> {
        let SbnConfig { data_dim, latent_dim, layers, nonlinear } = config;
        if data_dim == 0 || latent_dim == 0 || layers == 0 {
            return Err(TvoError::domain("belief net dimensions must be positive"));
        }
        let map = |prefix: String, input: usize, output: usize| {
            if nonlinear {
                Mlp::new(prefix, vec![input, latent_dim, latent_dim, output])
            } else {
                Mlp::linear(prefix, input, output)
            }
        };
        // decoders[0] maps z_1 to x, decoders[ℓ] maps z_{ℓ+1} to z_ℓ
        let mut decoders = vec![map("theta/decoder_x".into(), latent_dim, data_dim)];
        for l in 1..layers {
            decoders.push(map(format!("theta/decoder{l}"), latent_dim, latent_dim));
        }
        let mut encoders = vec![map("phi/encoder1".into(), data_dim, latent_dim)];
        for l in 2..=layers {
            encoders.push(map(format!("phi/encoder{l}"), latent_dim, latent_dim));
        }
        let mut specs = vec![("theta/prior.bias".to_string(), vec![latent_dim])];
        for m in decoders.iter().chain(&encoders) {
            specs.extend(m.segments());
        }
        let layout = Arc::new(ParamLayout::new(specs)?);
        let mut model = Self {
            config,
            data_mean: Vec::new(),
            output_bias: Vec::new(),
            decoders,
            encoders,
            layout,
        };
        model.set_data_mean(vec![0.5; data_dim])?;
        Ok(model)
    }

    pub fn config(&self) -> &SbnConfig {
        &self.config
    }

    pub fn data_mean(&self) -> &[f64] {
        &self.data_mean
    }

    /// Sets `x̄` and recomputes `x̃`.
    pub fn set_data_mean(&mut self, mean: Vec<f64>) -> Result<()> {
        let d = self.config.data_dim;
        if mean.len() != d {
            return Err(TvoError::domain(format!("data mean has {} entries, expected {d}", mean.len())));
        }
        let eps = 1.0 / d as f64;
        let eps = eps.min(0.5);
        self.output_bias = mean.iter().map(|&m| logit(m.clamp(eps, 1.0 - eps))).collect();
        self.data_mean = mean;
        Ok(())
    }

    /// Column means of a binary training set.
    pub fn with_training_data(mut self, x: &RealArray) -> Result<Self> {
        let (n, d) = (x.rows(), x.cols());
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(x.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
        self.set_data_mean(mean)?;
        Ok(self)
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.output_bias
    }

    fn layer_cols(&self, z: &RealArray, l: usize) -> RealArray {
        let dz = self.config.latent_dim;
        let rows = z.rows();
        let mut data = Vec::with_capacity(rows * dz);
        for r in 0..rows {
            data.extend_from_slice(&z.row(r)[l * dz..(l + 1) * dz]);
        }
        RealArray::matrix(rows, dz, data).expect("non-empty")
    }

    fn signs(a: &RealArray) -> RealArray {
        RealArray::new(a.shape().to_vec(), a.data().iter().map(|v| 2.0 * v - 1.0).collect()).expect("same shape")
    }

    fn centered_input(&self, x: &RealArray) -> RealArray {
        let data = x
            .data()
            .chunks(self.config.data_dim)
            .flat_map(|row| row.iter().zip(&self.data_mean).map(|(v, m)| (v - m + 1.0) / 2.0))
            .collect();
        RealArray::new(x.shape().to_vec(), data).expect("same shape")
    }

    fn concat_layers(layers: &[RealArray]) -> RealArray {
        let rows = layers[0].rows();
        let mut data = Vec::new();
        for r in 0..rows {
            for l in layers {
                data.extend_from_slice(l.row(r));
            }
        }
        let cols = layers.iter().map(|l| l.cols()).sum();
        RealArray::matrix(rows, cols, data).expect("non-empty")
    }

    fn add_output_bias(&self, logits: &mut RealArray) {
        let d = self.config.data_dim;
        for row in logits.data_mut().chunks_mut(d) {
            for (v, b) in row.iter_mut().zip(&self.output_bias) {
                *v += b;
            }
        }
    }
}

impl LatentModel for SigmoidBeliefNet {
    fn name(&self) -> &str {
        "sbn"
    }

    fn layout(&self) -> &Arc<ParamLayout> {
        &self.layout
    }

    fn latent(&self) -> LatentKind {
        LatentKind::Discrete(self.config.latent_dim * self.config.layers)
    }

    fn data_dim(&self) -> usize {
        self.config.data_dim
    }

    fn init_params(&self, seed: u64) -> ParamVector {
        let mut params = ParamVector::zeros(self.layout.clone());
        let mut rng = rng::rng(seed);
        for m in self.decoders.iter().chain(&self.encoders) {
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

    fn record(&self, tape: &mut Tape, x: &RealArray, z: LatentRows<'_>) -> Result<DensityNodes> {
        let LatentRows::Values(z) = z else {
            return Err(TvoError::Unsupported("belief net latents are discrete".into()));
        };
        self.validate_x(x)?;
        check_binary(z)?;
        let n = x.rows();
        let (dz, layers) = (self.config.latent_dim, self.config.layers);
        if z.rows() != n || z.cols() != dz * layers {
            return Err(TvoError::domain(format!(
                "latent rows must be [{n}, {}], got {:?}",
                dz * layers,
                z.shape()
            )));
        }
        let zl: Vec<RealArray> = (0..layers).map(|l| self.layer_cols(z, l)).collect();
        let signs: Vec<NodeId> = zl.iter().map(|a| tape.constant(Self::signs(a))).collect();

        // generative side
        let prior = tape.param("theta/prior.bias");
        let prior = tape.broadcast_rows(prior, n);
        let mut log_joint = bernoulli_log_prob(tape, prior, &zl[layers - 1]);
        for l in (0..layers - 1).rev() {
            let logits = self.decoders[l + 1].record(tape, signs[l + 1], n);
            let lp = bernoulli_log_prob(tape, logits, &zl[l]);
            log_joint = tape.add(log_joint, lp);
        }
        let logits = self.decoders[0].record(tape, signs[0], n);
        let bias = tape.constant(RealArray::vector(self.output_bias.clone()));
        let bias = tape.broadcast_rows(bias, n);
        let logits = tape.add(logits, bias);
        let lp = bernoulli_log_prob(tape, logits, x);
        let log_joint = tape.add(log_joint, lp);

        // inference side
        let input = tape.constant(self.centered_input(x));
        let logits = self.encoders[0].record(tape, input, n);
        let mut log_q = bernoulli_log_prob(tape, logits, &zl[0]);
        for l in 1..layers {
            let logits = self.encoders[l].record(tape, signs[l - 1], n);
            let lq = bernoulli_log_prob(tape, logits, &zl[l]);
            log_q = tape.add(log_q, lq);
        }
        Ok(DensityNodes { log_joint, log_q })
    }

    fn sample_q(&self, params: &ParamVector, x: &RealArray, rng: &mut Rng) -> Result<RealArray> {
        self.validate_x(x)?;
        let logits = self.encoders[0].apply(params, &self.centered_input(x))?;
        let mut layers = vec![sample_bernoulli(&logits, rng)];
        for l in 1..self.config.layers {
            let logits = self.encoders[l].apply(params, &Self::signs(&layers[l - 1]))?;
            layers.push(sample_bernoulli(&logits, rng));
        }
        Ok(Self::concat_layers(&layers))
    }

    fn sample_joint(&self, params: &ParamVector, n: usize, rng: &mut Rng) -> Result<(RealArray, RealArray)> {
        let (dz, layers) = (self.config.latent_dim, self.config.layers);
        let bias = params.segment("theta/prior.bias")?;
        let prior = RealArray::matrix(n, dz, bias.iter().copied().cycle().take(n * dz).collect())?;
        let mut zs = vec![sample_bernoulli(&prior, rng)];
        for l in (0..layers - 1).rev() {
            let logits = self.decoders[l + 1].apply(params, &Self::signs(zs.last().unwrap()))?;
            zs.push(sample_bernoulli(&logits, rng));
        }
        zs.reverse();
        let mut logits = self.decoders[0].apply(params, &Self::signs(&zs[0]))?;
        self.add_output_bias(&mut logits);
        let x = sample_bernoulli(&logits, rng);
        Ok((x, Self::concat_layers(&zs)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::log_sigmoid;

    fn small(nonlinear: bool) -> SigmoidBeliefNet {
        SigmoidBeliefNet::new(SbnConfig { data_dim: 5, latent_dim: 3, layers: 2, nonlinear }).unwrap()
    }

    #[test]
    fn output_bias_is_clamped_logit() {
        let mut m = small(false);
        m.set_data_mean(vec![0.0, 0.5, 1.0, 0.25, 0.9]).unwrap();
        let b = m.output_bias();
        assert!((b[0] - logit(0.2)).abs() < 1e-12);
        assert_eq!(b[1], 0.0);
        assert!((b[2] - logit(0.8)).abs() < 1e-12);
        assert!((b[3] - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn recorded_densities_match_direct_sum() {
        let m = small(false);
        let params = m.init_params(4);
        let mut r = rng::rng(1);
        let (x, z) = m.sample_joint(&params, 3, &mut r).unwrap();
        let (lp, lq) = m.log_densities(&params, &x, &z).unwrap();
        for row in 0..3 {
            let zr = z.row(row);
            let (z1, z2) = (&zr[..3], &zr[3..]);
            let s = |v: &[f64]| RealArray::matrix(1, v.len(), v.iter().map(|b| 2.0 * b - 1.0).collect()).unwrap();
            let bern = |logits: &[f64], v: &[f64]| -> f64 {
                logits.iter().zip(v).map(|(&l, &b)| log_sigmoid(if b == 1.0 { l } else { -l })).sum()
            };
            let prior = params.segment("theta/prior.bias").unwrap();
            let mut expect = bern(prior, z2);
            expect += bern(m.decoders[1].apply(&params, &s(z2)).unwrap().data(), z1);
            let mut lx = m.decoders[0].apply(&params, &s(z1)).unwrap();
            m.add_output_bias(&mut lx);
            expect += bern(lx.data(), x.row(row));
            assert!((lp[row] - expect).abs() < 1e-12);

            let xr = RealArray::matrix(1, 5, x.row(row).to_vec()).unwrap();
            let mut eq = bern(m.encoders[0].apply(&params, &m.centered_input(&xr)).unwrap().data(), z1);
            eq += bern(m.encoders[1].apply(&params, &s(z1)).unwrap().data(), z2);
            assert!((lq[row] - eq).abs() < 1e-12);
        }
    }

    #[test]
    fn densities_finite_for_nonlinear_variant() {
        let m = small(true);
        let params = m.init_params(2);
        let mut r = rng::rng(9);
        let x = RealArray::matrix(2, 5, vec![1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        let z = m.sample_q(&params, &x, &mut r).unwrap();
        assert_eq!(z.shape(), &[2, 6]);
        let (lp, lq) = m.log_densities(&params, &x, &z).unwrap();
        assert!(lp.iter().chain(&lq).all(|v| v.is_finite() && *v < 0.0));
    }

    #[test]
    fn rejects_non_binary_data() {
        let m = small(false);
        let params = m.init_params(0);
        let x = RealArray::matrix(1, 5, vec![0.5; 5]).unwrap();
        let z = RealArray::matrix(1, 6, vec![0.0; 6]).unwrap();
        assert!(matches!(m.log_densities(&params, &x, &z), Err(TvoError::Domain(_))));
        let mut tape = Tape::new();
        assert!(m.record(&mut tape, &x, LatentRows::Values(&z)).is_err());
    }
}
