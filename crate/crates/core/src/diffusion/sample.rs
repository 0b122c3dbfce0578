use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::ImageInput;
use crate::attention::attribution_heatmap;
use crate::autograd::Tape;
use crate::data::entity_positions;
use crate::embedding::TokenId;
use crate::error::{ensure, Result};
use crate::exec::Exec;
use crate::geometry::BoxNorm;
use crate::model::Model;
use crate::resampler::{GroundingPolicy, SubjectInput, MAX_SUBJECTS};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoLayoutConfig {
    pub threshold: f64,
    /// First sampling step whose masks come from attention maps.
    pub switch_step: usize,
    /// Use the request boxes before the switch instead of full-frame boxes.
    #[serde(default)]
    pub use_prior: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub guidance_scale: f64,
    pub gamma: f64,
    pub num_steps: usize,
    pub pseudo_layout: Option<PseudoLayoutConfig>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { guidance_scale: 7.5, gamma: 0.6, num_steps: 50, pseudo_layout: None }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        ensure!(
            self.guidance_scale >= 0.0 && self.guidance_scale.is_finite(),
            Config,
            "guidance_scale {} must be non-negative",
            self.guidance_scale
        );
        ensure!((0.0..=1.5).contains(&self.gamma), Config, "gamma {} outside [0, 1.5]", self.gamma);
        ensure!(
            self.num_steps >= 1 && self.num_steps <= schedule_len,
            Config,
            "num_steps {} outside 1..={schedule_len}",
            self.num_steps
        );
        if let Some(p) = &self.pseudo_layout {
            ensure!(p.threshold > 0.0 && p.threshold < 1.0, Config, "pseudo-layout threshold {} outside (0, 1)", p.threshold);
            ensure!(p.switch_step <= self.num_steps, Config, "switch step {} beyond {} steps", p.switch_step, self.num_steps);
        }
        Ok(())
    }
}

/// `ε_u + s·(ε_c − ε_u)`; `s = 1` returns `ε_c` and `s = 0` returns `ε_u`
/// untouched.
pub fn guided_eps(eps_uncond: Option<&[f64]>, eps_cond: Option<&[f64]>, s: f64) -> Result<Vec<f64>> {
    match (eps_uncond, eps_cond) {
        (_, Some(c)) if s == 1.0 => Ok(c.to_vec()),
        (Some(u), _) if s == 0.0 => Ok(u.to_vec()),
        (Some(u), Some(c)) => {
            ensure!(u.len() == c.len(), Shape, "guidance inputs differ in length");
            Ok(u.iter().zip(c).map(|(u, c)| u + s * (c - u)).collect())
        }
        _ => Err(crate::Error::Internal(format!("guidance scale {s} is missing a prediction"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Noise prediction as seen by the sampling loop.
pub trait EpsModel {
    fn eps(&mut self, step: usize, t: usize, z: &[f64], branch: Branch) -> Result<Vec<f64>>;
}

/// One ancestral step from `t` to `prev` (`None` means the final step).
pub fn ddpm_step(schedule: &NoiseSchedule, t: usize, prev: Option<usize>, z: &[f64], eps: &[f64], noise: Option<&[f64]>) -> Result<Vec<f64>> {
    let ab_t = schedule.alpha_bar(t)?;
    let ab_prev = match prev {
        Some(p) => schedule.alpha_bar(p)?,
        None => 1.0,
    };
    let beta = 1.0 - ab_t / ab_prev;
    let c1 = ab_prev.sqrt() * beta / (1.0 - ab_t);
    let c2 = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab_t);
    let var = beta * (1.0 - ab_prev) / (1.0 - ab_t);
    let (sa, sb) = (ab_t.sqrt(), (1.0 - ab_t).sqrt());
    let mut out: Vec<f64> = z
        .iter()
        .zip(eps)
        .map(|(z, e)| {
            let x0 = ((z - sb * e) / sa).clamp(-1.0, 1.0);
            c1 * x0 + c2 * z
        })
        .collect();
    if let Some(n) = noise {
        let sd = var.sqrt();
        out.iter_mut().zip(n).for_each(|(o, n)| *o += sd * n);
    }
    Ok(out)
}

/// Ancestral DDPM over evenly strided timesteps with classifier-free
/// guidance. Passes that the guidance scale makes irrelevant are skipped.
pub fn ddpm_sample<M: EpsModel + ?Sized>(
    model: &mut M,
    schedule: &NoiseSchedule,
    latent_len: usize,
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let ts = schedule.strided_timesteps(cfg.num_steps)?;
    let s = cfg.guidance_scale;
    let mut z: Vec<f64> = (0..latent_len).map(|_| rng.normal()).collect();
    for (i, &t) in ts.iter().enumerate() {
        let eps_c = if s != 0.0 { Some(model.eps(i, t, &z, Branch::Conditional)?) } else { None };
        let eps_u = if s != 1.0 { Some(model.eps(i, t, &z, Branch::Unconditional)?) } else { None };
        let eps = guided_eps(eps_u.as_deref(), eps_c.as_deref(), s)?;
        let prev = ts.get(i + 1).copied();
        let noise: Option<Vec<f64>> = prev.map(|_| (0..latent_len).map(|_| rng.normal()).collect());
        z = ddpm_step(schedule, t, prev, &z, &eps, noise.as_deref())?;
    }
    Ok(z)
}

/// Tight box around heatmap cells at or above `threshold`.
pub fn box_from_heatmap(heatmap: &Tensor, threshold: f64) -> Option<BoxNorm> {
    let (h, w) = (heatmap.rows(), heatmap.cols());
    let cells: Vec<bool> = heatmap.data().iter().map(|&v| v >= threshold).collect();
    BoxNorm::from_cells(&cells, h, w)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayoutStep {
    pub boxes: Vec<BoxNorm>,
    /// Subjects that fell back to the full frame after the switch.
    pub fallbacks: Vec<usize>,
}

/// Boxes for sampling step `step`. Before the switch: prior boxes or the
/// full frame. From the switch on: per subject, the tight box around its
/// thresholded text-attention heatmap.
pub fn pseudo_layout_boxes(
    step: usize,
    cfg: &PseudoLayoutConfig,
    text_maps: Option<&Tensor>,
    entity_columns: &[Option<usize>],
    prior: &[BoxNorm],
    latent_h: usize,
    latent_w: usize,
) -> Result<LayoutStep> {
    let n = entity_columns.len();
    if step < cfg.switch_step {
        let boxes = if cfg.use_prior { prior.to_vec() } else { vec![BoxNorm::FULL; n] };
        return Ok(LayoutStep { boxes, fallbacks: Vec::new() });
    }
    let mut boxes = Vec::with_capacity(n);
    let mut fallbacks = Vec::new();
    for (j, col) in entity_columns.iter().enumerate() {
        let found = match (text_maps, col) {
            (Some(maps), Some(c)) => box_from_heatmap(&attribution_heatmap(maps, &[*c], latent_h, latent_w)?, cfg.threshold),
            _ => None,
        };
        boxes.push(found.unwrap_or_else(|| {
            fallbacks.push(j);
            BoxNorm::FULL
        }));
    }
    Ok(LayoutStep { boxes, fallbacks })
}

/// `(1 − λ)·a + λ·b`, returning the endpoints themselves at `λ ∈ {0, 1}`.
pub fn interpolate_subject_tokens(a: &Tensor, b: &Tensor, lambda: f64) -> Result<Tensor> {
    ensure!(a.shape() == b.shape(), Shape, "token blocks {:?} and {:?} differ", a.shape(), b.shape());
    ensure!((0.0..=1.0).contains(&lambda), Contract, "interpolation weight {lambda} outside [0, 1]");
    if lambda == 0.0 {
        return Ok(a.clone());
    }
    if lambda == 1.0 {
        return Ok(b.clone());
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (1.0 - lambda) * x + lambda * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Blend subject `subject`'s tokens with those of another image under the
/// same entity and box.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolation {
    pub subject: usize,
    pub other_image: Tensor,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRequest {
    pub prompt_ids: Vec<TokenId>,
    pub subjects: Vec<SubjectInput>,
    pub interpolation: Option<Interpolation>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleOutput {
    pub image: Tensor,
    /// Per subject, the attribution heatmap of the last conditional pass.
    pub heatmaps: Vec<Tensor>,
    /// Boxes used by the last conditional pass.
    pub final_boxes: Vec<BoxNorm>,
    pub layout_fallbacks: usize,
}

/// Image tokens for a request, as a plain tensor (`N × d_c`).
pub fn image_tokens(model: &Model, req: &SampleRequest) -> Result<Option<Tensor>> {
    if req.subjects.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::inference();
    let cond = model.project(&mut tape, &req.subjects, GroundingPolicy::Always)?;
    let mut tokens = tape.tensor(cond.tokens);
    if let Some(ip) = &req.interpolation {
        ensure!(ip.subject < req.subjects.len(), Contract, "interpolated subject {} out of range", ip.subject);
        let mut swapped = req.subjects.clone();
        swapped[ip.subject].image = ip.other_image.clone();
        let other = model.project(&mut tape, &swapped, GroundingPolicy::Always)?;
        let other = tape.tensor(other.tokens);
        let (s, e) = cond.spans[ip.subject];
        let d = tokens.cols();
        let a = Tensor::new(vec![e - s, d], tokens.data()[s * d..e * d].to_vec())?;
        let b = Tensor::new(vec![e - s, d], other.data()[s * d..e * d].to_vec())?;
        let mixed = interpolate_subject_tokens(&a, &b, ip.lambda)?;
        tokens.data_mut()[s * d..e * d].copy_from_slice(mixed.data());
    }
    Ok(Some(tokens))
}

struct ModelEps<'a> {
    model: &'a Model,
    cond_text: Tensor,
    uncond_text: Tensor,
    tokens: Option<Tensor>,
    boxes: Vec<BoxNorm>,
    entity_columns: Vec<Option<usize>>,
    gamma: f64,
    pseudo: Option<PseudoLayoutConfig>,
    text_maps: Option<Tensor>,
    image_maps: Option<Tensor>,
    last_boxes: Vec<BoxNorm>,
    fallbacks: usize,
}

impl ModelEps<'_> {
    fn average_maps(&self, tape: &Tape, maps: &[crate::autograd::Var]) -> Result<Option<Tensor>> {
        let Some(first) = maps.first() else { return Ok(None) };
        let mut acc = tape.tensor(*first);
        for m in &maps[1..] {
            acc.data_mut().iter_mut().zip(tape.value(*m)).for_each(|(a, v)| *a += v);
        }
        let k = 1.0 / maps.len() as f64;
        acc.data_mut().iter_mut().for_each(|a| *a *= k);
        Ok(Some(acc))
    }
}

impl EpsModel for ModelEps<'_> {
    fn eps(&mut self, step: usize, t: usize, z: &[f64], branch: Branch) -> Result<Vec<f64>> {
        let dcfg = &self.model.config.denoiser;
        let mut tape = Tape::inference();
        let zv = tape.constant_raw(dcfg.cells(), dcfg.channels, z.to_vec())?;
        if branch == Branch::Unconditional {
            let text = tape.constant(&self.uncond_text);
            let out = self.model.denoise(&mut tape, zv, t, text, None)?;
            return Ok(tape.value(out.eps).to_vec());
        }
        let text = tape.constant(&self.cond_text);
        let boxes = match &self.pseudo {
            Some(p) if self.tokens.is_some() => {
                let layout = pseudo_layout_boxes(
                    step,
                    p,
                    self.text_maps.as_ref(),
                    &self.entity_columns,
                    &self.boxes,
                    dcfg.latent_h,
                    dcfg.latent_w,
                )?;
                self.fallbacks += layout.fallbacks.len();
                layout.boxes
            }
            _ => self.boxes.clone(),
        };
        let image = match &self.tokens {
            Some(tok) => Some(ImageInput { tokens: tape.constant(tok), boxes: &boxes, gamma: self.gamma }),
            None => None,
        };
        let out = self.model.denoise(&mut tape, zv, t, text, image)?;
        let full_res: Vec<_> = out.records.iter().filter(|r| r.grid_h == dcfg.latent_h).collect();
        let text_maps: Vec<_> = full_res.iter().map(|r| r.a_text).collect();
        let image_maps: Vec<_> = full_res.iter().filter_map(|r| r.a_img).collect();
        self.text_maps = self.average_maps(&tape, &text_maps)?;
        self.image_maps = self.average_maps(&tape, &image_maps)?;
        self.last_boxes = boxes;
        Ok(tape.value(out.eps).to_vec())
    }
}

/// One guided trajectory for `req`.
pub fn cfg_sample(model: &Model, req: &SampleRequest, cfg: &SamplerConfig, rng: &mut Rng) -> Result<SampleOutput> {
    cfg.validate(model.schedule().len())?;
    ensure!(req.subjects.len() <= MAX_SUBJECTS, Contract, "{} subjects exceed the maximum of {MAX_SUBJECTS}", req.subjects.len());
    let mut tape = Tape::inference();
    let cond = model.encode_prompt(&mut tape, &req.prompt_ids)?;
    let uncond = model.null_prompt(&mut tape)?;
    let entities: Vec<TokenId> = req.subjects.iter().map(|s| s.entity).collect();
    let mut eps_model = ModelEps {
        model,
        cond_text: tape.tensor(cond),
        uncond_text: tape.tensor(uncond),
        tokens: image_tokens(model, req)?,
        boxes: req.subjects.iter().map(|s| s.bbox).collect(),
        entity_columns: entity_positions(&req.prompt_ids, &entities),
        gamma: cfg.gamma,
        pseudo: cfg.pseudo_layout,
        text_maps: None,
        image_maps: None,
        last_boxes: Vec::new(),
        fallbacks: 0,
    };
    let z = ddpm_sample(&mut eps_model, model.schedule(), model.latent_len(), cfg, rng)?;
    let dcfg = &model.config.denoiser;
    let image = model.codec().decode(&z, dcfg.latent_h, dcfg.latent_w)?;

    let mut heatmaps = Vec::with_capacity(req.subjects.len());
    for (j, col) in eps_model.entity_columns.iter().enumerate() {
        let map = match (col, &eps_model.text_maps, &eps_model.image_maps) {
            (Some(c), Some(tm), _) => attribution_heatmap(tm, &[*c], dcfg.latent_h, dcfg.latent_w)?,
            (None, _, Some(im)) => {
                let offset = if dcfg.masked_attention { dcfg.dummy_count } else { 0 };
                let cols: Vec<usize> = (offset + j * dcfg.n_t..offset + (j + 1) * dcfg.n_t).collect();
                attribution_heatmap(im, &cols, dcfg.latent_h, dcfg.latent_w)?
            }
            _ => Tensor::zeros(vec![dcfg.latent_h, dcfg.latent_w]),
        };
        heatmaps.push(map);
    }
    Ok(SampleOutput { image, heatmaps, final_boxes: eps_model.last_boxes, layout_fallbacks: eps_model.fallbacks })
}

/// `n` trajectories; trajectory `i` uses the rng stream `(seed, i)`.
pub fn sample_many(model: &Model, req: &SampleRequest, cfg: &SamplerConfig, seed: u64, n: usize, exec: Exec) -> Result<Vec<SampleOutput>> {
    exec.try_map(n, |i| cfg_sample(model, req, cfg, &mut Rng::with_stream(seed, i as u64)))
}
