//! Decentralized collaborative dictionary learning.
//!
//! Participants on a peer-to-peer graph jointly learn shared patterns (a
//! sparse Gaussian graphical model mixture, or the decoder of a multi-task
//! VAE) while keeping their raw data and task-specific parameters private.
//! Network-wide sums are obtained by average consensus with random
//! chunking. The numeric core is generic over [`Real`] (`f32`/`f64`); the
//! aliases below pin the common types to one precision.

pub mod consensus;
pub mod ggm;
pub mod harness;
pub mod mtvae;
pub mod privacy;
pub mod rng;
pub mod scalar;
pub mod topology;

pub use scalar::Real;

pub type WeightMatrixF64 = topology::WeightMatrix<f64>;
pub type WeightMatrixF32 = topology::WeightMatrix<f32>;
pub type GgmGlobalF64 = ggm::GgmGlobal<f64>;
pub type GgmGlobalF32 = ggm::GgmGlobal<f32>;
pub type GgmFitF64 = ggm::GgmFit<f64>;
pub type GgmFitF32 = ggm::GgmFit<f32>;
pub type MlpF64 = mtvae::Mlp<f64>;
pub type MlpF32 = mtvae::Mlp<f32>;
pub type VaeFitF64 = mtvae::VaeFit<f64>;
pub type VaeFitF32 = mtvae::VaeFit<f32>;
