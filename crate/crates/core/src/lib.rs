//! Calibration of parametric prior measures over PDE coefficient fields from
//! indirect, noisy observations of many physical systems.
//!
//! The library is organized around a small number of subsystems:
//!
//! - [`randfield`]: Karhunen–Loève synthesis of Gaussian random fields and the
//!   transport maps producing level-set and lognormal coefficient fields.
//! - [`fem`]: structured-mesh P1 Darcy solver with weak-form residuals
//!   evaluated by array shifting, a conjugate-gradient solve, and synthetic
//!   dataset generation.
//! - [`measure`]: empirical-measure divergences (1D Wasserstein-2, weighted
//!   Dirac form, Monte Carlo weighted sliced-Wasserstein).
//! - [`tape`]: minimal reverse-mode differentiation over dense real tensors.
//! - [`nop`]: spectral neural operator, its residual loss, and the inner
//!   training loop of the bilevel scheme.
//! - [`calib`]: loss functionals, common-random-numbers finite-difference
//!   gradients, Adam/AMSGrad, and the two calibration algorithms.
//! - [`config`] / [`runner`]: config-driven CLI front end.

pub mod calib;
pub mod config;
pub mod error;
pub mod fem;
pub mod measure;
pub mod mesh;
pub mod nop;
pub mod plot;
pub mod randfield;
pub mod runner;
pub mod seeds;
pub mod tape;
pub mod verify;

pub use error::{Error, Result};
pub use mesh::{Dim, Mesh};
pub use randfield::{Family, NodalField, PriorSpec};
