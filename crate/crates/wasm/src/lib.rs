//! Browser bindings: the integrand `g(β)` of the geometric path with the left
//! and right Riemann sums a partition schedule puts under and over it.
//!
//! Every exported function returns a JSON [`BoundsView`]. The plain Rust
//! functions behind them are public so they can be tested off the browser.

use serde::Serialize;
use tvo::autodiff::{ParamVector, RealArray};
use tvo::models::{ConjugateGaussian, LatentModel, ToyBernoulli};
use tvo::oracles::enumerate;
use tvo::path::{integrand_curve, make_schedule, IntegrandCurve, PartitionSchedule, Spacing};
use tvo::{rng, Result};
use wasm_bindgen::prelude::*;

/// Points of the plotted curve on `[0, 1]` (schedule knots are added).
const PLOT_POINTS: usize = 201;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsView {
    pub betas: Vec<f64>,
    pub g: Vec<f64>,
    /// Per-point standard errors when `g` is a Monte Carlo estimate.
    pub std_errors: Option<Vec<f64>>,
    /// Exact integrand on `betas` when `g` is an estimate.
    pub reference_g: Option<Vec<f64>>,
    pub knots: Vec<f64>,
    pub knot_g: Vec<f64>,
    pub lower: f64,
    pub upper: f64,
    pub log_evidence: f64,
    pub elbo: f64,
    pub eubo: f64,
    pub beta_star: Option<f64>,
}

fn schedule(partitions: usize, beta1: f64, log_spacing: bool) -> Result<PartitionSchedule> {
    make_schedule(partitions, beta1, if log_spacing { Spacing::Log } else { Spacing::Equal })
}

fn plot_grid(s: &PartitionSchedule) -> Vec<f64> {
    let mut grid: Vec<f64> = (0..PLOT_POINTS).map(|i| i as f64 / (PLOT_POINTS - 1) as f64).collect();
    grid.extend_from_slice(s.betas());
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    grid
}

/// Left and right Riemann sums of knot values.
fn riemann(s: &PartitionSchedule, knot_g: &[f64]) -> (f64, f64) {
    let w = s.widths();
    let lower = w.iter().zip(knot_g).map(|(d, g)| d * g).sum();
    let upper = w.iter().zip(&knot_g[1..]).map(|(d, g)| d * g).sum();
    (lower, upper)
}

fn exact_view(s: &PartitionSchedule, mut g: impl FnMut(f64) -> Result<f64>, log_evidence: f64) -> Result<BoundsView> {
    let betas = plot_grid(s);
    let values = betas.iter().map(|&b| g(b)).collect::<Result<Vec<_>>>()?;
    let knot_g = s.betas().iter().map(|&b| g(b)).collect::<Result<Vec<_>>>()?;
    let (lower, upper) = riemann(s, &knot_g);
    let curve = IntegrandCurve { betas: betas.clone(), values: values.clone(), std_errors: None };
    Ok(BoundsView {
        elbo: values[0],
        eubo: *values.last().expect("non-empty grid"),
        beta_star: curve.beta_star(),
        betas,
        g: values,
        std_errors: None,
        reference_g: None,
        knots: s.betas().to_vec(),
        knot_g,
        lower,
        upper,
        log_evidence,
    })
}

/// Standard-normal prior, unit noise, `q(z | x) = N(q_mean, exp(q_log_std)²)`.
fn gaussian(q_mean: f64, q_log_std: f64) -> (ConjugateGaussian, ParamVector) {
    let m = ConjugateGaussian::new(1.0, 1.0).expect("positive scales");
    let p = m.params(0.0, 0.0, q_mean, q_log_std);
    (m, p)
}

/// Exact curve and bounds for the conjugate Gaussian model at datum `x`.
pub fn gaussian_view(x: f64, q_mean: f64, q_log_std: f64, partitions: usize, beta1: f64, log_spacing: bool) -> Result<BoundsView> {
    let s = schedule(partitions, beta1, log_spacing)?;
    let (m, p) = gaussian(q_mean, q_log_std);
    exact_view(&s, |b| Ok(m.analytic_g(&p, x, b)), m.analytic_log_evidence(&p, x))
}

/// The same curve estimated from one batch of `samples` draws from `q`,
/// with the exact curve as reference.
#[allow(clippy::too_many_arguments)]
pub fn gaussian_sampled_view(
    x: f64,
    q_mean: f64,
    q_log_std: f64,
    partitions: usize,
    beta1: f64,
    log_spacing: bool,
    samples: usize,
    seed: u64,
) -> Result<BoundsView> {
    let exact = gaussian_view(x, q_mean, q_log_std, partitions, beta1, log_spacing)?;
    let s = schedule(partitions, beta1, log_spacing)?;
    let (m, p) = gaussian(q_mean, q_log_std);
    let xs = RealArray::matrix(1, 1, vec![x])?;
    // the same seed draws the same batch for both grids
    let curve = integrand_curve(&m, &p, &xs, &exact.betas, samples, &mut rng::rng(seed))?;
    let knots = integrand_curve(&m, &p, &xs, s.betas(), samples, &mut rng::rng(seed))?;
    let (lower, upper) = riemann(&s, &knots.values);
    Ok(BoundsView {
        beta_star: curve.beta_star(),
        g: curve.values,
        std_errors: curve.std_errors,
        reference_g: Some(exact.g),
        knot_g: knots.values,
        lower,
        upper,
        ..exact
    })
}

/// Exact curve and bounds by enumeration for a random toy model and a datum
/// drawn from it. `posterior_q` replaces `q` by the exact posterior.
#[allow(clippy::too_many_arguments)]
pub fn toy_view(
    seed: u64,
    latents: usize,
    data_dim: usize,
    scale: f64,
    partitions: usize,
    beta1: f64,
    log_spacing: bool,
    posterior_q: bool,
) -> Result<BoundsView> {
    let s = schedule(partitions, beta1, log_spacing)?;
    let m = ToyBernoulli::new(latents, data_dim)?;
    let mut p = m.random_params(scale, seed);
    let (x, _) = m.sample_joint(&p, 1, &mut rng::rng(seed))?;
    if posterior_q {
        p = m.posterior_matched(&p)?;
    }
    let e = enumerate(&m, &p, x.row(0))?;
    exact_view(&s, |b| e.g(b), e.log_evidence)
}

fn to_js(view: Result<BoundsView>) -> std::result::Result<String, JsError> {
    let view = view.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&view).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = gaussianBounds)]
pub fn gaussian_bounds(
    x: f64,
    q_mean: f64,
    q_log_std: f64,
    partitions: usize,
    beta1: f64,
    log_spacing: bool,
) -> std::result::Result<String, JsError> {
    to_js(gaussian_view(x, q_mean, q_log_std, partitions, beta1, log_spacing))
}

#[wasm_bindgen(js_name = gaussianSampledBounds)]
#[allow(clippy::too_many_arguments)]
pub fn gaussian_sampled_bounds(
    x: f64,
    q_mean: f64,
    q_log_std: f64,
    partitions: usize,
    beta1: f64,
    log_spacing: bool,
    samples: usize,
    seed: u32,
) -> std::result::Result<String, JsError> {
    to_js(gaussian_sampled_view(x, q_mean, q_log_std, partitions, beta1, log_spacing, samples, seed as u64))
}

#[wasm_bindgen(js_name = toyBounds)]
#[allow(clippy::too_many_arguments)]
pub fn toy_bounds(
    seed: u32,
    latents: usize,
    data_dim: usize,
    scale: f64,
    partitions: usize,
    beta1: f64,
    log_spacing: bool,
    posterior_q: bool,
) -> std::result::Result<String, JsError> {
    to_js(toy_view(seed as u64, latents, data_dim, scale, partitions, beta1, log_spacing, posterior_q))
}
