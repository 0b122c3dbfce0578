use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::ImageInput;
use crate::attention::{attention_map_loss, SubjectRegion};
use crate::autograd::{apply_param_grads, sum_param_grads, Tape, Var};
use crate::data::{entity_positions, TrainingSample};
use crate::error::{ensure, Error, Result};
use crate::exec::Exec;
use crate::model::Model;
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamGroup, ParamId};
use crate::resampler::{GroundingPolicy, SubjectInput};
use crate::rng::Rng;

/// Which cross-attention maps the attention-map loss is applied to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionLossBranch {
    /// Text attention onto each subject's entity word.
    Text,
    /// Image attention onto each subject's condition tokens.
    Image,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub p_drop_text: f64,
    pub p_drop_image: f64,
    pub gamma: f64,
    pub attention_loss_weight: f64,
    pub attention_loss_branch: AttentionLossBranch,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            p_drop_text: 0.05,
            p_drop_image: 0.05,
            gamma: 1.0,
            attention_loss_weight: 0.0,
            attention_loss_branch: AttentionLossBranch::Text,
        }
    }
}

/// Everything random about one sample's loss, drawn before the forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisingDraw {
    pub t: usize,
    pub noise: Vec<f64>,
    pub z_t: Vec<f64>,
    pub drop_text: bool,
    pub drop_image: bool,
}

pub fn draw_noising(schedule: &NoiseSchedule, z0: &[f64], rng: &mut Rng, cfg: &LossConfig) -> Result<NoisingDraw> {
    let t = rng.below(schedule.len());
    let noise: Vec<f64> = (0..z0.len()).map(|_| rng.normal()).collect();
    let drop_text = rng.uniform() < cfg.p_drop_text;
    let drop_image = rng.uniform() < cfg.p_drop_image;
    let z_t = schedule.q_sample(z0, t, &noise)?;
    Ok(NoisingDraw { t, noise, z_t, drop_text, drop_image })
}

pub struct Prediction {
    pub eps: Var,
    /// Mean attention-map loss when it is enabled and defined.
    pub attention_loss: Option<Var>,
}

/// Anything that predicts noise for a training sample.
pub trait NoisePredictor: Sync {
    fn schedule(&self) -> &NoiseSchedule;

    fn latent(&self, sample: &TrainingSample) -> Result<Vec<f64>>;

    fn predict(
        &self,
        tape: &mut Tape,
        sample: &TrainingSample,
        draw: &NoisingDraw,
        rng: &mut Rng,
        cfg: &LossConfig,
    ) -> Result<Prediction>;
}

pub struct SampleLoss {
    pub total: Var,
    pub l_ip: f64,
    pub l_am: f64,
}

/// `‖ε − ε_θ(z_t, t, c)‖²` averaged over elements, plus the weighted
/// attention-map loss.
pub fn sample_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    tape: &mut Tape,
    sample: &TrainingSample,
    rng: &mut Rng,
    cfg: &LossConfig,
) -> Result<SampleLoss> {
    let z0 = predictor.latent(sample)?;
    let draw = draw_noising(predictor.schedule(), &z0, rng, cfg)?;
    let pred = predictor.predict(tape, sample, &draw, rng, cfg)?;
    let (rows, cols) = tape.shape(pred.eps);
    ensure!(rows * cols == draw.noise.len(), Shape, "prediction has {} values, noise has {}", rows * cols, draw.noise.len());
    let target = tape.constant_raw(rows, cols, draw.noise)?;
    let diff = tape.sub(pred.eps, target)?;
    let sq = tape.square(diff);
    let l_ip = tape.mean(sq);
    let l_ip_value = tape.scalar(l_ip);
    let (total, l_am) = match pred.attention_loss {
        Some(am) if cfg.attention_loss_weight > 0.0 => {
            let l_am = tape.scalar(am);
            let weighted = tape.scale(am, cfg.attention_loss_weight);
            (tape.add(l_ip, weighted)?, l_am)
        }
        _ => (l_ip, 0.0),
    };
    let v = tape.scalar(total);
    if !v.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    Ok(SampleLoss { total, l_ip: l_ip_value, l_am })
}

#[derive(Clone, Debug)]
pub struct BatchLoss {
    pub loss: f64,
    pub l_ip: f64,
    pub l_am: f64,
    /// Gradients of `loss`, summed over samples in batch order.
    pub grads: Vec<(ParamId, Vec<f64>)>,
}

/// Mean loss over the batch. Every sample gets its own rng stream forked in
/// batch order, so the result is the same whether samples run sequentially
/// or in parallel.
pub fn training_loss<P: NoisePredictor + ?Sized>(
    predictor: &P,
    batch: &[&TrainingSample],
    rng: &mut Rng,
    cfg: &LossConfig,
    exec: Exec,
    with_grads: bool,
) -> Result<BatchLoss> {
    ensure!(!batch.is_empty(), Contract, "training batch is empty");
    let streams: Vec<Rng> = (0..batch.len()).map(|i| rng.fork(i as u64)).collect();
    let scale = 1.0 / batch.len() as f64;
    let parts = exec.try_map(batch.len(), |i| {
        let mut rng = streams[i].clone();
        let mut tape = if with_grads { Tape::new() } else { Tape::inference() };
        let s = sample_loss(predictor, &mut tape, batch[i], &mut rng, cfg)?;
        let grads = if with_grads { tape.backward_scaled(s.total, scale)?.into_params() } else { Vec::new() };
        Ok((tape.scalar(s.total), s.l_ip, s.l_am, grads))
    })?;
    let (mut loss, mut l_ip, mut l_am) = (0.0, 0.0, 0.0);
    let mut grad_parts = Vec::with_capacity(parts.len());
    for (total, ip, am, g) in parts {
        loss += total;
        l_ip += ip;
        l_am += am;
        grad_parts.push(g);
    }
    Ok(BatchLoss { loss: loss * scale, l_ip: l_ip * scale, l_am: l_am * scale, grads: sum_param_grads(grad_parts) })
}

/// The real model as a noise predictor.
pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    /// Off during text-only base training.
    pub image_enabled: bool,
}

impl NoisePredictor for ModelPredictor<'_> {
    fn schedule(&self) -> &NoiseSchedule {
        self.model.schedule()
    }

    fn latent(&self, sample: &TrainingSample) -> Result<Vec<f64>> {
        self.model.codec().encode(&sample.target)
    }

    fn predict(
        &self,
        tape: &mut Tape,
        sample: &TrainingSample,
        draw: &NoisingDraw,
        rng: &mut Rng,
        cfg: &LossConfig,
    ) -> Result<Prediction> {
        let m = self.model;
        let dcfg = &m.config.denoiser;
        let text = if draw.drop_text { m.null_prompt(tape)? } else { m.encode_prompt(tape, &sample.caption_ids)? };
        let active: Vec<_> = sample.active_subjects().collect();
        let use_image = self.image_enabled && !draw.drop_image && !active.is_empty();
        let inputs: Vec<SubjectInput> = active.iter().map(|s| s.to_input()).collect();
        let boxes: Vec<_> = active.iter().map(|s| s.bbox).collect();
        let image = if use_image {
            let cond = m.project(tape, &inputs, GroundingPolicy::Random(rng))?;
            Some(ImageInput { tokens: cond.tokens, boxes: &boxes, gamma: cfg.gamma })
        } else {
            None
        };
        let z = tape.constant_raw(dcfg.cells(), dcfg.channels, draw.z_t.clone())?;
        let out = m.denoise(tape, z, draw.t, text, image)?;

        let attention_loss = if cfg.attention_loss_weight > 0.0 {
            let mut layer_losses = Vec::new();
            match cfg.attention_loss_branch {
                AttentionLossBranch::Text if !draw.drop_text => {
                    let entities: Vec<_> = active.iter().map(|s| s.entity).collect();
                    let positions = entity_positions(&sample.caption_ids, &entities);
                    for rec in &out.records {
                        let regions: Vec<SubjectRegion> = active
                            .iter()
                            .zip(&positions)
                            .filter_map(|(s, p)| p.map(|p| SubjectRegion { cells: s.bbox.cell_mask(rec.grid_h, rec.grid_w), columns: vec![p] }))
                            .collect();
                        if !regions.is_empty() {
                            layer_losses.push(attention_map_loss(tape, &[rec.a_text], &regions)?.loss);
                        }
                    }
                }
                AttentionLossBranch::Image if use_image => {
                    for rec in &out.records {
                        let Some(a) = rec.a_img else { continue };
                        let offset = rec.masks.as_ref().map_or(0, |mk| mk.dummy_count);
                        let regions: Vec<SubjectRegion> = active
                            .iter()
                            .enumerate()
                            .map(|(j, s)| SubjectRegion {
                                cells: s.bbox.cell_mask(rec.grid_h, rec.grid_w),
                                columns: (offset + j * dcfg.n_t..offset + (j + 1) * dcfg.n_t).collect(),
                            })
                            .collect();
                        layer_losses.push(attention_map_loss(tape, &[a], &regions)?.loss);
                    }
                }
                _ => {}
            }
            if layer_losses.is_empty() {
                None
            } else {
                let all = tape.concat_rows(&layer_losses)?;
                Some(tape.mean(all))
            }
        } else {
            None
        };
        Ok(Prediction { eps: out.eps, attention_loss })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Text-only base training, then adapter training on the frozen base.
    TwoPhase,
    /// Base and adapter together from the first step.
    Joint,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Base,
    Adapter,
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total optimizer steps across both phases.
    pub steps: usize,
    /// Leading steps spent on text-only base training in two-phase mode.
    pub base_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub mode: TrainMode,
    /// Keep base weights fixed while the adapter trains.
    pub freeze_base: bool,
    /// Probability of dropping text, and separately image, conditions.
    pub p_drop: f64,
    pub gamma: f64,
    pub attention_loss_weight: f64,
    pub attention_loss_branch: AttentionLossBranch,
    pub adam: AdamConfig,
    /// Checkpoint interval in steps; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            base_steps: 1000,
            batch: 8,
            lr: 1e-3,
            mode: TrainMode::TwoPhase,
            freeze_base: true,
            p_drop: 0.05,
            gamma: 1.0,
            attention_loss_weight: 0.0,
            attention_loss_branch: AttentionLossBranch::Text,
            adam: AdamConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch >= 1, Config, "train.batch must be at least 1");
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Config, "train.lr must be positive");
        ensure!((0.0..=1.0).contains(&self.p_drop), Config, "train.p_drop {} outside [0, 1]", self.p_drop);
        ensure!(self.attention_loss_weight >= 0.0, Config, "train.attention_loss_weight must be non-negative");
        Ok(())
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            p_drop_text: self.p_drop,
            p_drop_image: self.p_drop,
            gamma: self.gamma,
            attention_loss_weight: self.attention_loss_weight,
            attention_loss_branch: self.attention_loss_branch,
        }
    }

    pub fn phase_at(&self, step: usize) -> Phase {
        match self.mode {
            TrainMode::Joint => Phase::Joint,
            TrainMode::TwoPhase if step < self.base_steps => Phase::Base,
            TrainMode::TwoPhase => Phase::Adapter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// 1-based count of completed optimizer steps.
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub l_ip: f64,
    pub l_am: f64,
}

fn set_phase(model: &mut Model, phase: Phase, freeze_base: bool) {
    let p = &mut model.params;
    p.set_group_trainable(ParamGroup::Encoder, false);
    match phase {
        Phase::Base => {
            p.set_group_trainable(ParamGroup::Base, true);
            p.set_group_trainable(ParamGroup::Adapter, false);
        }
        Phase::Adapter => {
            p.set_group_trainable(ParamGroup::Base, !freeze_base);
            p.set_group_trainable(ParamGroup::Adapter, true);
        }
        Phase::Joint => {
            p.set_group_trainable(ParamGroup::Base, true);
            p.set_group_trainable(ParamGroup::Adapter, true);
        }
    }
}

/// Run `cfg.steps` optimizer steps on batches drawn with replacement.
/// `on_step` sees every step's log and the updated model.
pub fn train<F>(model: &mut Model, data: &[TrainingSample], cfg: &TrainConfig, rng: &mut Rng, exec: Exec, mut on_step: F) -> Result<Vec<StepLog>>
where
    F: FnMut(&StepLog, &Model) -> Result<()>,
{
    cfg.validate()?;
    if cfg.steps == 0 {
        return Ok(Vec::new());
    }
    ensure!(!data.is_empty(), Contract, "cannot train on an empty dataset");
    let loss_cfg = cfg.loss_config();
    let mut logs = Vec::with_capacity(cfg.steps);
    let mut phase: Option<Phase> = None;
    let mut adam = Adam::new(cfg.adam);
    for step in 0..cfg.steps {
        let p = cfg.phase_at(step);
        if phase != Some(p) {
            set_phase(model, p, cfg.freeze_base);
            adam = Adam::new(cfg.adam);
            phase = Some(p);
        }
        let batch: Vec<&TrainingSample> = (0..cfg.batch).map(|_| &data[rng.below(data.len())]).collect();
        let predictor = ModelPredictor { model, image_enabled: p != Phase::Base };
        let bl = training_loss(&predictor, &batch, rng, &loss_cfg, exec, true)?;
        model.params.zero_grads();
        apply_param_grads(&mut model.params, &bl.grads)?;
        adam.step(&mut model.params, cfg.lr)?;
        let log = StepLog { step: step + 1, phase: p, loss: bl.loss, l_ip: bl.l_ip, l_am: bl.l_am };
        on_step(&log, model)?;
        logs.push(log);
    }
    Ok(logs)
}
