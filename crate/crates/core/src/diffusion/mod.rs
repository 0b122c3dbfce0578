//! Toy latent diffusion: noise schedule, a small UNet-style denoiser with
//! dual cross-attention, ε-prediction training and guided ancestral sampling.

mod denoiser;
mod latent;
mod sample;
mod schedule;
mod train;

pub use denoiser::{attention_layers, denoise, init_denoiser, AttentionRecord, DenoiserConfig, DenoiserOutput, ImageInput};
pub use latent::LatentCodec;
pub use sample::{
    box_from_heatmap, cfg_sample, ddpm_sample, ddpm_step, guided_eps, image_tokens, interpolate_subject_tokens,
    pseudo_layout_boxes, sample_many, Branch, EpsModel, Interpolation, LayoutStep, PseudoLayoutConfig, SampleOutput,
    SampleRequest, SamplerConfig,
};
pub use schedule::{q_sample_with, NoiseSchedule, ScheduleConfig};
pub use train::{
    draw_noising, sample_loss, train, training_loss, AttentionLossBranch, BatchLoss, LossConfig, ModelPredictor,
    NoisePredictor, NoisingDraw, Phase, Prediction, SampleLoss, StepLog, TrainConfig, TrainMode,
};
