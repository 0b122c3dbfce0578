//! The JSON run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_file, ForgeConfig, SceneConfig};
use crate::diffusion::{SamplerConfig, TrainConfig};
use crate::error::{ensure, Error, Result};
use crate::model::ModelConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub num_samples: usize,
    pub canvas: usize,
    /// Strength of the frame-to-frame subject motion; 0 repeats the frame.
    pub jitter: f64,
    pub forge: ForgeConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { num_samples: 500, canvas: 32, jitter: 1.0, forge: ForgeConfig::default() }
    }
}

impl DataConfig {
    /// Forge settings with `canvas` and `jitter` applied.
    pub fn forge_config(&self) -> ForgeConfig {
        ForgeConfig {
            scene: SceneConfig { canvas: self.canvas, jitter: self.jitter, ..self.forge.scene },
            ..self.forge.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
#[derive(Default)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
}


impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.forge_config().validate()?;
        self.sample.validate(self.model.schedule.steps)?;
        ensure!(
            self.data.canvas == self.model.canvas(),
            Config,
            "data.canvas {} differs from the model canvas {}",
            self.data.canvas,
            self.model.canvas()
        );
        ensure!(
            self.data.forge.crop_size == self.model.patch.crop_size,
            Config,
            "data.forge.crop_size {} differs from model.patch.crop_size {}",
            self.data.forge.crop_size,
            self.model.patch.crop_size
        );
        Ok(())
    }

    /// Parse and validate; unknown keys are errors naming their path.
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::parse(context, format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = read_file(path)?;
        let text = String::from_utf8(bytes).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
        RunConfig::from_json(&text, &path.display().to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
