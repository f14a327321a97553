//! Advantage-aware policy optimization for offline reinforcement learning on
//! desk-scale continuous-control tasks.
//!
//! The crate is organised bottom-up:
//!
//! - [`approximator`]: dense MLPs with exact backward passes, Adam and soft target updates.
//! - [`envs`]: the one-step jump and point-mass tasks plus scripted behavior policies.
//! - [`dataset`]: offline datasets, proportioned mixing, minibatch sampling and JSON Lines I/O.
//! - [`cvae`]: the advantage-conditioned variational autoencoder.
//! - [`critic`]: twin Q-networks, the V-network, TD losses and advantage conditions.
//! - [`actor`]: the latent policy, action generation through the frozen decoder and the actor loss.
//! - [`trainer`]: the training loop, ablation variants and checkpoints.
//! - [`evalsuite`]: rollouts, advantage sweeps, PCA of latent codes and seed aggregation.
//!
//! All randomness flows through [`rng::StreamRng`], so identical seeds give bitwise-identical runs.

pub mod actor;
pub mod approximator;
pub mod critic;
pub mod cvae;
pub mod dataset;
pub mod envs;
pub mod error;
pub mod evalsuite;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};

/// Row-major batch of vectors, one sample per row.
pub type Matrix = ndarray::Array2<f64>;
