//! Thermodynamic variational objective.
//!
//! The log evidence of a latent-variable model equals the integral over
//! `β ∈ [0, 1]` of the expected instantaneous ELBO under the geometric path
//! `π_β ∝ p(x, z)^β q(z | x)^(1-β)`. Left and right Riemann sums of that
//! integral give lower and upper bounds; this crate estimates them with one
//! batch of tempered self-normalized importance weights and differentiates
//! them with the covariance gradient estimator.
//!
//! Module map:
//! - [`autodiff`]: reverse-mode tape over dense arrays.
//! - [`path`]: path densities, partition schedules, integrand curves.
//! - [`estimators`]: weight tables, expectations and gradient estimators.
//! - [`objectives`]: ELBO, EUBO, TVO bounds, IWAE and training gradients.
//! - [`models`]: sigmoid belief net, Gaussian VAE and two exactly solvable models.
//! - [`oracles`]: enumeration, quadrature and identity checks.
//! - [`trainer`]: Adam, data loading, training runs and sweeps.

pub mod autodiff;
pub mod error;
pub mod estimators;
pub mod models;
pub mod objectives;
pub mod oracles;
pub mod path;
pub mod rng;
pub mod trainer;

pub use error::{Result, TvoError};
