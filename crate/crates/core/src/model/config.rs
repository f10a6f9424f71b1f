//! Architecture, regularizer and training settings, read from TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::BlockPartition;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// Latent grid extent; also the block grid of the image.
    pub latent_rows: usize,
    pub latent_cols: usize,
    pub n_z: usize,
    pub mapping_depth: usize,
    /// Feature width at each resolution, starting at the latent grid. Every
    /// entry after the first adds one 2x upsampling stage.
    pub channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub image_channels: usize,
    /// Channels of the conditioning input `x`; 0 for unconditional models.
    pub cond_channels: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            latent_rows: 4,
            latent_cols: 4,
            n_z: 32,
            mapping_depth: 8,
            channels: vec![64, 64, 32, 32],
            convs_per_stage: 2,
            image_channels: 3,
            cond_channels: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn stages(&self) -> usize {
        self.channels.len() - 1
    }

    pub fn height(&self) -> usize {
        self.latent_rows << self.stages()
    }

    pub fn width(&self) -> usize {
        self.latent_cols << self.stages()
    }

    pub fn n_blocks(&self) -> usize {
        self.latent_rows * self.latent_cols
    }

    /// One image block per latent block.
    pub fn partition(&self) -> BlockPartition {
        BlockPartition::grid_rect(self.height(), self.width(), self.latent_rows, self.latent_cols)
            .expect("validated grid")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.latent_rows == 0 || self.latent_cols == 0 || self.n_z == 0 {
            return bad("latent grid and n_z must be positive");
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad("channels must be a non-empty list of positive widths");
        }
        if self.convs_per_stage == 0 || self.image_channels == 0 {
            return bad("convs_per_stage and image_channels must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Width at each resolution from the image down; every entry after the
    /// first halves the resolution.
    pub channels: Vec<usize>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            channels: vec![32, 32, 64, 64],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PathLengthMode {
    Standard,
    Spatial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegularizerSettings {
    pub lambda_d: f64,
    pub lambda_r1: f64,
    /// Weight of the path-length term in either mode.
    pub lambda_pl: f64,
    pub pl_mode: PathLengthMode,
    pub gamma_plus: f64,
    pub gamma_minus: f64,
    /// Running-mean decay of the standard path-length target.
    pub pl_decay: f64,
    /// Regularizers run every `lazy_interval` steps, scaled by it.
    pub lazy_interval: usize,
}

impl Default for RegularizerSettings {
    fn default() -> Self {
        RegularizerSettings {
            lambda_d: 0.0,
            lambda_r1: 1.0,
            lambda_pl: 2.0,
            pl_mode: PathLengthMode::Standard,
            gamma_plus: 1.0,
            gamma_minus: 0.1,
            pl_decay: 0.01,
            lazy_interval: 1,
        }
    }
}

impl RegularizerSettings {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        let weights = [self.lambda_d, self.lambda_r1, self.lambda_pl];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return bad("regularizer weights must be finite and non-negative");
        }
        if self.lazy_interval == 0 {
            return bad("lazy_interval must be at least 1");
        }
        if self.pl_mode == PathLengthMode::Spatial && !(self.gamma_plus > self.gamma_minus && self.gamma_minus >= 0.0) {
            return bad("spatial path length needs gamma_plus > gamma_minus >= 0");
        }
        if !(0.0..=1.0).contains(&self.pl_decay) {
            return bad("pl_decay must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub seed: u64,
    pub data_seed: u64,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            seed: 0,
            data_seed: 0,
            steps: 2000,
            batch: 8,
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub regularizers: RegularizerSettings,
    pub training: TrainSettings,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.regularizers.validate()?;
        let d = &self.discriminator.channels;
        if d.is_empty() || d.contains(&0) {
            return Err(Error::Config("discriminator channels must be positive".into()));
        }
        let (h, w) = (self.generator.height(), self.generator.width());
        let shrink = 1 << (d.len() - 1);
        if h % shrink != 0 || w % shrink != 0 {
            return Err(Error::Config(format!(
                "{} discriminator stages do not divide a {h}x{w} image",
                d.len()
            )));
        }
        if self.training.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.regularizers.pl_mode == PathLengthMode::Spatial && self.generator.n_blocks() < 2 {
            return Err(Error::Config("spatial path length needs at least two blocks".into()));
        }
        Ok(())
    }

    /// Small model used by tests, benches and the acceptance sweep:
    /// 16x16 images over a 4x4 latent grid, two convolutions per stage.
    pub fn toy() -> Self {
        TrainConfig {
            generator: GeneratorConfig {
                latent_rows: 4,
                latent_cols: 4,
                n_z: 16,
                mapping_depth: 4,
                channels: vec![16, 16, 16],
                convs_per_stage: 2,
                image_channels: 3,
                cond_channels: 0,
            },
            discriminator: DiscriminatorConfig {
                channels: vec![16, 16, 16],
            },
            ..Default::default()
        }
    }
}
