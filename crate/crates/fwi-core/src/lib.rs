//! Acoustic full-waveform inversion toolkit.
//!
//! The crate builds up from a differentiable 2D acoustic simulator to a
//! Bayesian inversion driver:
//!
//! - [`model`]: velocity grids, acquisition geometry, Ricker source,
//!   synthetic-data noise, and the on-disk grid/record formats.
//! - [`propagator`]: eighth-order-space / second-order-time forward
//!   modeling with a free surface and sponge absorbers, plus exact
//!   discrete adjoint gradients of any trace misfit.
//! - [`misfit`]: l2 and trace-wise 1D Wasserstein-1 data misfits and
//!   smoothed total variation, each with its exact derivative.
//! - [`autodiff`]: reverse-mode differentiation over dense 4-axis arrays
//!   with the layer set the generator network needs, plus Adam.
//! - [`skipnet`]: the encoder-decoder generator with masked skip
//!   connections mapping a fixed random tensor to a velocity grid.
//! - [`bayes`]: pretraining, variational inversion, Monte-Carlo
//!   conditional-mean inference, and the classical baselines.
//! - [`metrics`]: relative l2 error, SNR, and SSIM between models.

pub mod autodiff;
pub mod bayes;
pub mod error;
pub mod metrics;
pub mod misfit;
pub mod model;
pub mod propagator;
pub mod skipnet;

pub use error::{FwiError, Result};
