//! Configuration file read by every verb.
//!
//! The model, regularizer and training tables are the core training config;
//! `[eval]` and `[ablation]` are optional. Command-line flags override the
//! file, and `SSN_OUT` overrides `output_dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssn_core::metrics::ablation::EvalSettings;
use ssn_core::model::{DiscriminatorConfig, GeneratorConfig, RegularizerSettings, TrainSettings};
use ssn_core::TrainConfig;

pub const OUT_ENV: &str = "SSN_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSettings {
    pub lambdas: Vec<f64>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            lambdas: vec![0.0, 10.0, 100.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub output_dir: PathBuf,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub regularizers: RegularizerSettings,
    pub training: TrainSettings,
    pub eval: EvalSettings,
    pub ablation: AblationSettings,
}

impl Default for CliConfig {
    /// The toy model.
    fn default() -> Self {
        let t = TrainConfig::toy();
        CliConfig {
            output_dir: PathBuf::from("out"),
            generator: t.generator,
            discriminator: t.discriminator,
            regularizers: t.regularizers,
            training: t.training,
            eval: EvalSettings::default(),
            ablation: AblationSettings::default(),
        }
    }
}

impl CliConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        let c: CliConfig = toml::from_str(text)?;
        c.train().validate()?;
        Ok(c)
    }

    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("reading {}: {e}", p.display()))?;
                Self::from_toml(&text).map_err(|e| anyhow::anyhow!("config {}: {e}", p.display()))
            }
            None => Ok(Self::default()),
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            generator: self.generator.clone(),
            discriminator: self.discriminator.clone(),
            regularizers: self.regularizers.clone(),
            training: self.training.clone(),
        }
    }

    /// `flag`, else `SSN_OUT`, else `output_dir`.
    pub fn out_dir(&self, flag: Option<&Path>) -> PathBuf {
        flag.map(Path::to_path_buf)
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| self.output_dir.clone())
    }
}
