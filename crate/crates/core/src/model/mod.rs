//! The spatially stochastic generator, its discriminator and training.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod network;
pub mod params;
pub mod train;

pub use config::{DiscriminatorConfig, GeneratorConfig, PathLengthMode, RegularizerSettings, TrainConfig, TrainSettings};
pub use params::ParamStore;
pub use train::{generate_with, StepLogs, TrainState};
