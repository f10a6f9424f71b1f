//! Spatially stochastic networks: a spatial-latent generator that can
//! resample individual image blocks with low distortion elsewhere.

pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod ldbr;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod tensor;

pub use blocks::{compose_latent, BlockPartition, LatentGrid};
pub use error::{Error, Result};
pub use model::{TrainConfig, TrainState};
pub use tensor::{Graph, Padding, Tensor, Var};
