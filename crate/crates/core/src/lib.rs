//! A desk-scale laboratory for adversarial unsupervised domain adaptation
//! under severe class imbalance.
//!
//! The crate builds a latent-code adversarial domain adaptation (LADA)
//! network from a minimal dense-network core, measures class imbalance as the
//! KL divergence between target and source class distributions, constructs
//! evaluation splits at requested imbalance levels, and orchestrates
//! imbalance sweeps over the code-sampling variants.
//!
//! Layering, bottom up:
//!
//! - [`ndnum`] — matrices, dense networks, losses, optimizers, gradient checks
//! - [`classdist`] — KL/entropy algebra, the relaxed entropy, the CI sampler
//! - [`datasets`] — synthetic domain pairs and feature CSV I/O
//! - [`net`] — the LADA model, latent codes, prediction fusion, checkpoints
//! - [`training`] — stage-1 supervised and stage-2 adversarial training
//! - [`harness`] — experiments, sweeps, KL-convergence tracking, exports
//! - [`cli`] — config files, manifests, and the command implementations

pub mod classdist;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod ndnum;
pub mod net;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
