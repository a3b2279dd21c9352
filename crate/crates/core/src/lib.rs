//! Confounder imputation with stochastic neural networks.
//!
//! The crate is `no_std` (it needs `alloc`) and holds the numerical core:
//!
//! * [`nn`]: dense feed-forward modules with exact reverse-mode gradients
//!   with respect to both parameters and inputs.
//! * [`model`]: binds modules into one of four causal DAG variants and
//!   exposes the log-density gradients the sampler needs.
//! * [`prior`]: the spike-and-slab mixture Gaussian prior.
//! * [`sghmc`]: alternating latent imputation (SGHMC) and prior-regularised
//!   parameter ascent, staged as pretrain / train / finetune.
//! * [`estimate`]: Monte-Carlo potential outcomes, ATE, CATE, marginal
//!   effects and error metrics.
//! * [`datagen`]: seeded simulators that emit ground truth.
//! * [`diagnostics`]: latent-overlap stress test and warm-start bootstrap.
//!
//! IO, configuration and the command line live in the `ci-stonet` crate.

#![no_std]

extern crate alloc;

pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod estimate;
pub mod linalg;
pub mod math;
pub mod model;
pub mod nn;
pub mod prior;
pub mod rng;
pub mod sghmc;

pub use error::{Error, Result};
pub use linalg::Matrix;
