use serde::{Deserialize, Serialize};

use crate::embedding::{PatchEncoderConfig, Vocab};
use crate::error::{ensure, Error, Result};
use crate::exec::Exec;
use crate::rng::Rng;

use super::matching::{build_matched_sample, match_subjects, PatchEmbedder};
use super::sample::{filter_and_pad, FilterConfig, TrainingSample};
use super::scene::{synth_scene_pair, SceneConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForgeConfig {
    pub scene: SceneConfig,
    pub filter: FilterConfig,
    /// Largest accepted cosine distance between matched crops.
    pub match_threshold: f64,
    /// Seed of the frozen patch encoder used for matching.
    pub embedder_seed: u64,
    pub crop_size: usize,
    /// Scene pairs tried per sample before giving up.
    pub max_attempts: usize,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            scene: SceneConfig::default(),
            filter: FilterConfig::default(),
            match_threshold: 0.3,
            embedder_seed: 0x5eed,
            crop_size: 16,
            max_attempts: 32,
        }
    }
}

impl ForgeConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        ensure!(self.match_threshold >= 0.0, Config, "match_threshold must be non-negative");
        ensure!(self.max_attempts >= 1, Config, "max_attempts must be at least 1");
        ensure!(self.crop_size >= 1, Config, "crop_size must be positive");
        Ok(())
    }
}

pub struct Forge {
    cfg: ForgeConfig,
    vocab: Vocab,
    embedder: PatchEmbedder,
}

impl Forge {
    pub fn new(cfg: ForgeConfig, vocab: Vocab) -> Result<Self> {
        cfg.validate()?;
        let patch = PatchEncoderConfig { crop_size: cfg.crop_size, ..PatchEncoderConfig::default() };
        let embedder = PatchEmbedder::new(patch, cfg.embedder_seed)?;
        Ok(Forge { cfg, vocab, embedder })
    }

    pub fn config(&self) -> &ForgeConfig {
        &self.cfg
    }

    /// Sample `index` of the dataset drawn from `seed`; depends on nothing
    /// but those two numbers.
    pub fn sample(&self, seed: u64, index: u64) -> Result<TrainingSample> {
        let mut rng = Rng::with_stream(seed, index);
        for _ in 0..self.cfg.max_attempts {
            let pair = synth_scene_pair(&mut rng, &self.cfg.scene)?;
            let corr = match_subjects(
                (&pair.reference.image, &pair.reference.annotations),
                (&pair.target.image, &pair.target.annotations),
                self.cfg.crop_size,
                self.cfg.match_threshold,
                |crop| self.embedder.embed(crop),
            )?;
            let matched = build_matched_sample(&pair, &corr, self.cfg.crop_size)?;
            if let Some(s) = filter_and_pad(matched, &self.cfg.filter, &self.vocab, self.cfg.crop_size)? {
                return Ok(s);
            }
        }
        Err(Error::Internal(format!("sample {index}: no scene survived filtering in {} attempts", self.cfg.max_attempts)))
    }

    pub fn generate(&self, seed: u64, count: usize, exec: Exec) -> Result<Vec<TrainingSample>> {
        exec.try_map(count, |i| self.sample(seed, i as u64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn samples_are_order_free() {
        let forge = Forge::new(ForgeConfig::default(), Vocab::toy()).unwrap();
        let all = forge.generate(7, 4, Exec::Sequential).unwrap();
        assert_eq!(forge.sample(7, 2).unwrap(), all[2]);
        for s in &all {
            assert_eq!(s.subjects.len(), 4);
            assert!(s.num_active() >= 1);
        }
    }
}
