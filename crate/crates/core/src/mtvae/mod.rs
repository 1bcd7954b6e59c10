//! Multi-task variational autoencoder: a decoder `θ` shared by all
//! participants and one private encoder `φ^s` each, trained by gradient
//! ascent on the lower bound with decoder gradients summed over the network.

mod checkpoint;
mod elbo;
mod mlp;
mod train;

use thiserror::Error;

use crate::consensus::ConsensusError;

pub use checkpoint::{MlpRecord, VaeCheckpoint};
pub use elbo::{
    anomaly_score_mc, diag_gaussian_log_density, elbo, elbo_at_encoding, elbo_grad, kl_term,
    mc_draws, ElboEstimate, ElboGrad,
};
pub use mlp::{Forward, Mlp, MlpSpec};
pub use train::{
    fit, fit_from, global_step, init_params, local_seed, local_sgd, local_sgd_clipped, steps_per_epoch,
    write_training_log,
    EpochRecord, LocalStep, VaeConfig, VaeFit, VaeScorer,
};

#[derive(Debug, Error)]
pub enum VaeError {
    #[error("invalid network shape: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("the number of Monte-Carlo samples must be at least 1")]
    InvalidSamples,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("objective diverged at epoch {epoch}")]
    Diverged { epoch: usize, history: Vec<f64> },
    #[error(transparent)]
    Consensus(#[from] ConsensusError),
}
