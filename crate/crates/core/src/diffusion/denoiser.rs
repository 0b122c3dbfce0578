use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{assemble_masks, dual_cross_attention, init_cross_attention, AssembledMask, CrossAttentionConfig, ImageBranch};
use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::geometry::BoxNorm;
use crate::layers::{self, init_linear, init_norm, linear, sinusoidal};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub latent_h: usize,
    pub latent_w: usize,
    pub channels: usize,
    pub base_width: usize,
    /// Grid heights at which cross-attention is inserted: `latent_h` and/or
    /// `latent_h / 2`.
    pub attn_resolutions: Vec<usize>,
    pub heads: usize,
    pub n_t: usize,
    pub dummy_count: usize,
    pub time_dim: usize,
    /// Box-masked multi-subject attention with dummy tokens and background
    /// zeroing. Off means plain decoupled cross-attention.
    pub masked_attention: bool,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            latent_h: 16,
            latent_w: 16,
            channels: 3,
            base_width: 16,
            attn_resolutions: vec![16, 8],
            heads: 2,
            n_t: 4,
            dummy_count: 4,
            time_dim: 32,
            masked_attention: true,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.latent_h >= 2 && self.latent_w >= 2 && self.latent_h.is_multiple_of(2) && self.latent_w.is_multiple_of(2),
            Config,
            "latent grid {}×{} must have even sides",
            self.latent_h,
            self.latent_w
        );
        ensure!(self.channels >= 1 && self.base_width >= 1 && self.time_dim >= 2, Config, "denoiser widths must be positive");
        ensure!(self.n_t >= 1, Config, "n_t must be at least 1");
        ensure!(
            self.base_width.is_multiple_of(self.heads),
            Config,
            "base_width {} does not split into {} heads",
            self.base_width,
            self.heads
        );
        for &r in &self.attn_resolutions {
            ensure!(
                r == self.latent_h || r == self.latent_h / 2,
                Config,
                "attention resolution {r} is neither {} nor {}",
                self.latent_h,
                self.latent_h / 2
            );
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.latent_h * self.latent_w
    }

    fn attn_at(&self, h: usize) -> bool {
        self.attn_resolutions.contains(&h)
    }
}

/// Names and grid sizes of the attention layers, in forward order.
pub fn attention_layers(cfg: &DenoiserConfig) -> Vec<(&'static str, usize, usize)> {
    let (h, w) = (cfg.latent_h, cfg.latent_w);
    let mut out = Vec::new();
    if cfg.attn_at(h) {
        out.push(("down.attn", h, w));
    }
    if cfg.attn_at(h / 2) {
        out.push(("mid.attn", h / 2, w / 2));
    }
    if cfg.attn_at(h) {
        out.push(("up.attn", h, w));
    }
    out
}

fn cross_cfg(cfg: &DenoiserConfig, width: usize, d_text: usize, d_cond: usize) -> CrossAttentionConfig {
    CrossAttentionConfig {
        d_model: width,
        d_text,
        d_cond,
        heads: cfg.heads,
        dummy_count: if cfg.masked_attention { cfg.dummy_count } else { 0 },
        pre_norm: true,
    }
}

fn width_at(cfg: &DenoiserConfig, h: usize) -> usize {
    if h == cfg.latent_h {
        cfg.base_width
    } else {
        2 * cfg.base_width
    }
}

fn init_res_block(store: &mut ParamStore, p: &str, c_in: usize, c_out: usize, t_dim: usize, rng: &mut Rng) -> Result<()> {
    let g = ParamGroup::Base;
    init_norm(store, &format!("{p}.norm1"), c_in, g)?;
    init_linear(store, &format!("{p}.conv1"), 9 * c_in, c_out, true, g, rng)?;
    init_linear(store, &format!("{p}.time"), t_dim, c_out, true, g, rng)?;
    init_norm(store, &format!("{p}.norm2"), c_out, g)?;
    init_linear(store, &format!("{p}.conv2"), 9 * c_out, c_out, true, g, rng)?;
    if c_in != c_out {
        init_linear(store, &format!("{p}.skip"), c_in, c_out, false, g, rng)?;
    }
    Ok(())
}

fn res_block(tape: &mut Tape, store: &ParamStore, p: &str, x: Var, temb: Var, h: usize, w: usize) -> Result<Var> {
    let a = layers::norm(tape, store, &format!("{p}.norm1"), x)?;
    let a = tape.silu(a);
    let a = tape.im2col3(a, h, w)?;
    let a = linear(tape, store, &format!("{p}.conv1"), a)?;
    let t = linear(tape, store, &format!("{p}.time"), temb)?;
    let a = tape.add_row(a, t)?;
    let a = layers::norm(tape, store, &format!("{p}.norm2"), a)?;
    let a = tape.silu(a);
    let a = tape.im2col3(a, h, w)?;
    let a = linear(tape, store, &format!("{p}.conv2"), a)?;
    let skip = if store.id(&format!("{p}.skip.w")).is_ok() { linear(tape, store, &format!("{p}.skip"), x)? } else { x };
    tape.add(skip, a)
}

/// Create every denoiser parameter. Backbone and text-branch weights are
/// `Base`; image-branch keys/values and dummy tokens are `Adapter`.
pub fn init_denoiser(store: &mut ParamStore, cfg: &DenoiserConfig, d_text: usize, d_cond: usize, rng: &mut Rng) -> Result<()> {
    cfg.validate()?;
    let g = ParamGroup::Base;
    let (c, t) = (cfg.base_width, cfg.time_dim);
    init_linear(store, "time.mlp1", t, t, true, g, rng)?;
    init_linear(store, "time.mlp2", t, t, true, g, rng)?;
    init_linear(store, "conv_in", 9 * cfg.channels, c, true, g, rng)?;
    init_res_block(store, "down.res", c, c, t, rng)?;
    init_linear(store, "down.proj", c, 2 * c, true, g, rng)?;
    init_res_block(store, "mid.res", 2 * c, 2 * c, t, rng)?;
    init_linear(store, "up.proj", 3 * c, c, true, g, rng)?;
    init_res_block(store, "up.res", c, c, t, rng)?;
    init_norm(store, "out.norm", c, g)?;
    init_linear(store, "out.conv", 9 * c, cfg.channels, true, g, rng)?;
    for (name, h, _) in attention_layers(cfg) {
        init_cross_attention(store, name, &cross_cfg(cfg, width_at(cfg, h), d_text, d_cond), g, rng)?;
    }
    Ok(())
}

/// Image condition as seen by the denoiser.
#[derive(Clone, Copy)]
pub struct ImageInput<'a> {
    pub tokens: Var,
    /// One box per subject, in token-block order.
    pub boxes: &'a [BoxNorm],
    pub gamma: f64,
}

pub struct AttentionRecord {
    pub layer: &'static str,
    pub grid_h: usize,
    pub grid_w: usize,
    pub a_text: Var,
    pub a_img: Option<Var>,
    pub masks: Option<AssembledMask>,
}

pub struct DenoiserOutput {
    pub eps: Var,
    pub records: Vec<AttentionRecord>,
    pub degenerate_rows: usize,
}

/// Predict the noise in `z_t` (`HW × channels`, row-major cells).
pub fn denoise(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &DenoiserConfig,
    z_t: Var,
    t: usize,
    text: Var,
    image: Option<ImageInput<'_>>,
) -> Result<DenoiserOutput> {
    let (h, w) = (cfg.latent_h, cfg.latent_w);
    ensure!(tape.shape(z_t) == (h * w, cfg.channels), Shape, "latent is {:?}, expected [{}, {}]", tape.shape(z_t), h * w, cfg.channels);
    if let Some(img) = &image {
        ensure!(!img.boxes.is_empty(), Contract, "image condition without boxes");
        ensure!(
            tape.shape(img.tokens).0 == img.boxes.len() * cfg.n_t,
            Contract,
            "{} image tokens for {} boxes of {} tokens",
            tape.shape(img.tokens).0,
            img.boxes.len(),
            cfg.n_t
        );
    }
    let d_text = tape.shape(text).1;
    let d_cond = image.as_ref().map_or(0, |i| tape.shape(i.tokens).1);

    let temb = tape.constant_raw(1, cfg.time_dim, sinusoidal(t as f64, cfg.time_dim))?;
    let temb = linear(tape, store, "time.mlp1", temb)?;
    let temb = tape.silu(temb);
    let temb = linear(tape, store, "time.mlp2", temb)?;
    let temb = tape.silu(temb);

    let mut masks: BTreeMap<usize, AssembledMask> = BTreeMap::new();
    let mut records = Vec::new();
    let mut degenerate_rows = 0;
    let mut attend = |tape: &mut Tape, name: &'static str, x: Var, gh: usize, gw: usize| -> Result<Var> {
        if !cfg.attn_at(gh) {
            return Ok(x);
        }
        let ccfg = cross_cfg(cfg, width_at(cfg, gh), d_text, d_cond.max(1));
        let mask = match (&image, cfg.masked_attention) {
            (Some(img), true) => {
                if let std::collections::btree_map::Entry::Vacant(e) = masks.entry(gh) {
                    e.insert(assemble_masks(img.boxes, gh, gw, cfg.n_t, cfg.dummy_count)?);
                }
                masks.get(&gh)
            }
            _ => None,
        };
        let branch = image.as_ref().map(|img| ImageBranch { tokens: img.tokens, masks: mask, gamma: img.gamma });
        let out = dual_cross_attention(tape, store, name, &ccfg, x, text, branch)?;
        degenerate_rows += out.degenerate_rows;
        records.push(AttentionRecord { layer: name, grid_h: gh, grid_w: gw, a_text: out.a_text, a_img: out.a_img, masks: mask.cloned() });
        Ok(out.z_out)
    };

    let x = tape.im2col3(z_t, h, w)?;
    let x = linear(tape, store, "conv_in", x)?;
    let x = res_block(tape, store, "down.res", x, temb, h, w)?;
    let skip = attend(tape, "down.attn", x, h, w)?;
    let x = tape.avg_pool2(skip, h, w)?;
    let x = linear(tape, store, "down.proj", x)?;
    let x = res_block(tape, store, "mid.res", x, temb, h / 2, w / 2)?;
    let x = attend(tape, "mid.attn", x, h / 2, w / 2)?;
    let x = tape.upsample2(x, h / 2, w / 2)?;
    let x = tape.concat_cols(&[x, skip])?;
    let x = linear(tape, store, "up.proj", x)?;
    let x = res_block(tape, store, "up.res", x, temb, h, w)?;
    let x = attend(tape, "up.attn", x, h, w)?;
    let x = layers::norm(tape, store, "out.norm", x)?;
    let x = tape.silu(x);
    let x = tape.im2col3(x, h, w)?;
    let eps = linear(tape, store, "out.conv", x)?;
    Ok(DenoiserOutput { eps, records, degenerate_rows })
}
