//! Multi-level variational autoencoder for long-form text.
//!
//! The crate is organized bottom-up:
//!
//! - [`ndcore`]: dense arrays, a reverse-mode tape, the fixed set of neural
//!   operations the networks need, gradient checking, and the optimizer.
//! - [`corpus`]: segmentation, vocabulary, padded hierarchical batches.
//! - [`encoder`]: hierarchical CNN inference network and posterior heads.
//! - [`latent`]: Gaussian sampling, closed-form KLs, the learned conditional prior.
//! - [`decoder`]: plan-vector sentence LSTM, word LSTM, flat baseline decoder.
//! - [`trainer`]: the five model variants, objectives, annealing, evaluation.
//! - [`metrics`]: BLEU family, n-gram diversity, toy sentiment classifier.
//! - [`workbench`]: sampling, interpolation, attribute arithmetic, export.

pub mod corpus;
pub mod decoder;
pub mod encoder;
pub mod error;
pub mod latent;
pub mod metrics;
pub mod ndcore;
pub mod trainer;
pub mod workbench;

pub use error::{Error, Result};
