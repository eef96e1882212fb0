use rand::Rng as _;

use crate::autodiff::{NodeId, ParamVector, Tape};
use crate::error::Result;
use crate::rng::Rng;

/// Stack of affine layers with `tanh` between them (none after the last).
///
/// Layer `i` owns the segments `{prefix}.{i}.weight` (`[in, out]`) and
/// `{prefix}.{i}.bias` (`[out]`). A single layer is a plain linear map.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    prefix: String,
    dims: Vec<usize>,
}

impl Mlp {
    pub fn new(prefix: impl Into<String>, dims: Vec<usize>) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        Self { prefix: prefix.into(), dims }
    }

    pub fn linear(prefix: impl Into<String>, input: usize, output: usize) -> Self {
        Self::new(prefix, vec![input, output])
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    fn weight(&self, i: usize) -> String {
        format!("{}.{i}.weight", self.prefix)
    }

    fn bias(&self, i: usize) -> String {
        format!("{}.{i}.bias", self.prefix)
    }

    pub fn segments(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, w) in self.dims.windows(2).enumerate() {
            out.push((self.weight(i), vec![w[0], w[1]]));
            out.push((self.bias(i), vec![w[1]]));
        }
        out
    }

    pub fn record(&self, tape: &mut Tape, input: NodeId, rows: usize) -> NodeId {
        let layers = self.dims.len() - 1;
        let mut h = input;
        for i in 0..layers {
            let w = tape.param(&self.weight(i));
            let b = tape.param(&self.bias(i));
            h = tape.affine(h, w, b, rows);
            if i + 1 < layers {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(&self, params: &mut ParamVector, rng: &mut Rng) -> Result<()> {
        for (i, w) in self.dims.windows(2).enumerate() {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            for v in params.segment_mut(&self.weight(i))? {
                *v = rng.random_range(-limit..limit);
            }
            params.segment_mut(&self.bias(i))?.iter_mut().for_each(|b| *b = 0.0);
        }
        Ok(())
    }
}

impl Mlp {
    /// Direct evaluation on a batch of rows, without recording.
    pub fn apply(&self, params: &ParamVector, input: &crate::autodiff::RealArray) -> Result<crate::autodiff::RealArray> {
        let rows = input.rows();
        let layers = self.dims.len() - 1;
        let mut h = input.data().to_vec();
        for i in 0..layers {
            let (din, dout) = (self.dims[i], self.dims[i + 1]);
            let w = params.segment(&self.weight(i))?;
            let b = params.segment(&self.bias(i))?;
            let mut out = Vec::with_capacity(rows * dout);
            for r in 0..rows {
                let x = &h[r * din..(r + 1) * din];
                let mut acc = b.to_vec();
                for (k, &xk) in x.iter().enumerate() {
                    if xk == 0.0 {
                        continue;
                    }
                    let wrow = &w[k * dout..(k + 1) * dout];
                    for (a, &wv) in acc.iter_mut().zip(wrow) {
                        *a += xk * wv;
                    }
                }
                if i + 1 < layers {
                    acc.iter_mut().for_each(|a| *a = a.tanh());
                }
                out.extend_from_slice(&acc);
            }
            h = out;
        }
        crate::autodiff::RealArray::matrix(rows, self.output_dim(), h)
    }
}
