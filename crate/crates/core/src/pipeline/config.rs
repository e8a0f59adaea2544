//! The JSON run configuration shared by the CLI and examples.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::ModelConfig;
use crate::error::{Error, Result};
use crate::pipeline::postprocess::InferConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_images: 500, val_images: 100, image_size: 64, classes: 2, seed: 7 }
    }
}

impl DataConfig {
    /// The validation split uses a seed derived from the training seed.
    pub fn val_seed(&self) -> u64 {
        self.seed.wrapping_add(1_000_003)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub infer: InferConfig,
    pub precision: Precision,
}

impl Config {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.model.num_classes < self.data.classes {
            return Err(Error::Input("model has fewer classes than the data".into()));
        }
        Ok(())
    }

    /// Overrides every seed with `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self.model.init_seed = seed;
        self
    }
}
