//! The full toy model: frozen encoders, grounding resampler and denoiser.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::diffusion::{denoise, init_denoiser, DenoiserConfig, DenoiserOutput, ImageInput, LatentCodec, NoiseSchedule, ScheduleConfig};
use crate::embedding::{encode_text, init_patch_encoder, init_text_encoder, PatchEncoderConfig, TextEncoderConfig, TokenId, Vocab};
use crate::error::{ensure, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::resampler::{init_resampler, project_subjects_with, GroundingPolicy, ImageCondition, ResamplerConfig, SubjectInput};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub text: TextEncoderConfig,
    pub patch: PatchEncoderConfig,
    pub resampler: ResamplerConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    /// Pixels per latent cell along each side.
    pub latent_factor: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            text: TextEncoderConfig::default(),
            patch: PatchEncoderConfig::default(),
            resampler: ResamplerConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
            latent_factor: 2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.resampler.validate()?;
        self.denoiser.validate()?;
        ensure!(
            self.resampler.n_t == self.denoiser.n_t,
            Config,
            "resampler n_t {} differs from denoiser n_t {}",
            self.resampler.n_t,
            self.denoiser.n_t
        );
        ensure!(self.resampler.d_i == self.patch.dim, Config, "resampler d_i {} differs from patch dim {}", self.resampler.d_i, self.patch.dim);
        ensure!(self.text.dim.is_multiple_of(self.text.heads), Config, "text dim {} does not split into {} heads", self.text.dim, self.text.heads);
        ensure!(self.latent_factor >= 1, Config, "latent_factor must be at least 1");
        ensure!(
            self.patch.crop_size.is_multiple_of(self.patch.patch),
            Config,
            "crop size {} is not a multiple of patch size {}",
            self.patch.crop_size,
            self.patch.patch
        );
        Ok(())
    }

    /// Side length of generated images.
    pub fn canvas(&self) -> usize {
        self.denoiser.latent_h * self.latent_factor
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    schedule: NoiseSchedule,
    codec: LatentCodec,
}

impl Model {
    /// Fresh weights from `seed`. Encoder weights start frozen.
    pub fn init(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let mut params = ParamStore::new();
        init_text_encoder(&mut params, &config.text, vocab.len(), &mut rng)?;
        init_patch_encoder(&mut params, &config.patch, &mut rng)?;
        init_resampler(&mut params, &config.resampler, &config.patch, config.text.dim, &mut rng)?;
        init_denoiser(&mut params, &config.denoiser, config.text.dim, config.resampler.d_c, &mut rng)?;
        params.set_group_trainable(ParamGroup::Encoder, false);
        Model::from_parts(config, vocab, params)
    }

    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: ParamStore) -> Result<Model> {
        config.validate()?;
        let schedule = NoiseSchedule::new(&config.schedule)?;
        let codec = LatentCodec::new(config.latent_factor)?;
        Ok(Model { config, vocab, params, schedule, codec })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn codec(&self) -> LatentCodec {
        self.codec
    }

    pub fn canvas(&self) -> usize {
        self.config.canvas()
    }

    pub fn latent_len(&self) -> usize {
        self.config.denoiser.cells() * self.config.denoiser.channels
    }

    pub fn encode_prompt(&self, tape: &mut Tape, ids: &[TokenId]) -> Result<Var> {
        encode_text(tape, &self.params, &self.config.text, &self.vocab, ids)
    }

    /// Encoding of the NULL prompt used for dropped or unconditional text.
    pub fn null_prompt(&self, tape: &mut Tape) -> Result<Var> {
        self.encode_prompt(tape, &[self.vocab.null()])
    }

    pub fn project(&self, tape: &mut Tape, subjects: &[SubjectInput], policy: GroundingPolicy<'_>) -> Result<ImageCondition> {
        project_subjects_with(tape, &self.params, &self.config.resampler, &self.config.patch, subjects, policy)
    }

    pub fn denoise(&self, tape: &mut Tape, z_t: Var, t: usize, text: Var, image: Option<ImageInput<'_>>) -> Result<DenoiserOutput> {
        denoise(tape, &self.params, &self.config.denoiser, z_t, t, text, image)
    }
}
