//! Grounding resampler: per-subject query-and-distill of image features into
//! `n_t` condition tokens, concatenated across subjects into `c_i`.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::embedding::{
    build_grounding_tokens, encode_image_patches, init_grounding, GroundingSource, GroundingTokens,
    PatchEncoderConfig, TokenId,
};
use crate::error::{ensure, Error, Result};
use crate::geometry::BoxNorm;
use crate::layers::{self, init_linear, init_norm, linear, multi_head_attention};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const MAX_SUBJECTS: usize = 4;

/// How subject image features become condition tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectorKind {
    /// Attention layers with grounding-token queries.
    GroundingResampler,
    /// Mean-pooled features through one linear map (ablation baseline).
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResamplerConfig {
    pub depth: usize,
    pub n_t: usize,
    pub d_q: usize,
    pub d_i: usize,
    pub d_c: usize,
    pub heads: usize,
    pub grounding_drop_prob: f64,
    pub num_freqs: usize,
    pub grounding_hidden: usize,
    pub projector: ProjectorKind,
}

impl Default for ResamplerConfig {
    fn default() -> Self {
        ResamplerConfig {
            depth: 2,
            n_t: 4,
            d_q: 32,
            d_i: 32,
            d_c: 32,
            heads: 2,
            grounding_drop_prob: 0.1,
            num_freqs: 8,
            grounding_hidden: 64,
            projector: ProjectorKind::GroundingResampler,
        }
    }
}

impl ResamplerConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.depth >= 1, Config, "resampler depth must be at least 1");
        ensure!(self.n_t >= 1, Config, "n_t must be at least 1");
        ensure!(self.heads >= 1 && self.d_q.is_multiple_of(self.heads), Config, "d_q {} not divisible by {} heads", self.d_q, self.heads);
        ensure!(
            (0.0..=1.0).contains(&self.grounding_drop_prob),
            Config,
            "grounding_drop_prob {} outside [0, 1]",
            self.grounding_drop_prob
        );
        ensure!(self.num_freqs >= 1, Config, "num_freqs must be at least 1");
        Ok(())
    }
}

pub fn init_resampler(
    store: &mut ParamStore,
    cfg: &ResamplerConfig,
    patch: &PatchEncoderConfig,
    text_dim: usize,
    rng: &mut Rng,
) -> Result<()> {
    cfg.validate()?;
    ensure!(cfg.d_i == patch.dim, Config, "resampler d_i {} != patch encoder dim {}", cfg.d_i, patch.dim);
    let g = ParamGroup::Adapter;
    match cfg.projector {
        ProjectorKind::GroundingResampler => {
            init_grounding(store, cfg, text_dim, rng)?;
            init_linear(store, "resampler.proj_in", cfg.d_i, cfg.d_q, true, g, rng)?;
            for l in 0..cfg.depth {
                let p = format!("resampler.layers.{l}");
                init_norm(store, &format!("{p}.norm_q"), cfg.d_q, g)?;
                init_norm(store, &format!("{p}.norm_x"), cfg.d_q, g)?;
                for proj in ["q", "k", "v", "o"] {
                    init_linear(store, &format!("{p}.attn.{proj}"), cfg.d_q, cfg.d_q, false, g, rng)?;
                }
                init_norm(store, &format!("{p}.norm_ff"), cfg.d_q, g)?;
                init_linear(store, &format!("{p}.ff1"), cfg.d_q, 2 * cfg.d_q, true, g, rng)?;
                init_linear(store, &format!("{p}.ff2"), 2 * cfg.d_q, cfg.d_q, true, g, rng)?;
            }
            init_linear(store, "resampler.proj_out", cfg.d_q, cfg.d_c, true, g, rng)?;
        }
        ProjectorKind::Linear => {
            init_linear(store, "resampler.linear", cfg.d_i, cfg.n_t * cfg.d_c, true, g, rng)?;
        }
    }
    init_norm(store, "resampler.norm_out", cfg.d_c, g)?;
    Ok(())
}

/// The attention part of one layer, before the residual: queries from
/// `f_q`, keys and values from `[f_i ∥ f_q]`. Returns the output and the
/// head-averaged attention weights over the `P + n_t` keys.
pub fn rs_attention(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ResamplerConfig,
    layer: usize,
    f_q: Var,
    f_i: Option<Var>,
) -> Result<(Var, Var)> {
    let p = format!("resampler.layers.{layer}");
    let qn = layers::norm(tape, store, &format!("{p}.norm_q"), f_q)?;
    let kv = match f_i {
        Some(fi) => {
            ensure!(tape.shape(fi).1 == cfg.d_q, Shape, "image features must be projected to d_q first");
            let xn = layers::norm(tape, store, &format!("{p}.norm_x"), fi)?;
            tape.concat_rows(&[xn, qn])?
        }
        None => qn,
    };
    let q = linear(tape, store, &format!("{p}.attn.q"), qn)?;
    let k = linear(tape, store, &format!("{p}.attn.k"), kv)?;
    let v = linear(tape, store, &format!("{p}.attn.v"), kv)?;
    let heads = multi_head_attention(tape, q, k, v, cfg.heads, None)?;
    let out = linear(tape, store, &format!("{p}.attn.o"), heads.out)?;
    Ok((out, heads.probs))
}

/// One RSAttn block: residual attention over `[f_i ∥ f_q]`, then a residual
/// feed-forward network, both pre-normalized.
pub fn rs_attention_layer(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ResamplerConfig,
    layer: usize,
    f_q: Var,
    f_i: Option<Var>,
) -> Result<Var> {
    ensure!(tape.shape(f_q).1 == cfg.d_q, Shape, "queries have {} columns, expected {}", tape.shape(f_q).1, cfg.d_q);
    let (attn, _) = rs_attention(tape, store, cfg, layer, f_q, f_i)?;
    let x = tape.add(f_q, attn)?;
    let p = format!("resampler.layers.{layer}");
    let h = layers::norm(tape, store, &format!("{p}.norm_ff"), x)?;
    let h = linear(tape, store, &format!("{p}.ff1"), h)?;
    let h = tape.silu(h);
    let h = linear(tape, store, &format!("{p}.ff2"), h)?;
    tape.add(x, h)
}

/// Condition tokens for a single subject, `n_t × d_c`.
pub fn resample_subject(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ResamplerConfig,
    patch: &PatchEncoderConfig,
    image: &Tensor,
    grounding: Option<&GroundingTokens>,
) -> Result<Var> {
    let features = encode_image_patches(tape, store, patch, image)?;
    let out = match cfg.projector {
        ProjectorKind::GroundingResampler => {
            let g = grounding.ok_or_else(|| Error::Contract("grounding resampler needs grounding tokens".into()))?;
            ensure!(tape.shape(g.tokens).0 == cfg.n_t, Contract, "grounding has {} tokens, expected {}", tape.shape(g.tokens).0, cfg.n_t);
            let x = linear(tape, store, "resampler.proj_in", features)?;
            let mut q = g.tokens;
            for l in 0..cfg.depth {
                q = rs_attention_layer(tape, store, cfg, l, q, Some(x))?;
            }
            linear(tape, store, "resampler.proj_out", q)?
        }
        ProjectorKind::Linear => {
            let p = tape.shape(features).0;
            let pool = tape.constant_raw(1, p, vec![1.0 / p as f64; p])?;
            let pooled = tape.matmul(pool, features)?;
            let flat = linear(tape, store, "resampler.linear", pooled)?;
            tape.reshape(flat, cfg.n_t, cfg.d_c)?
        }
    };
    layers::norm(tape, store, "resampler.norm_out", out)
}

/// One referenced subject: its image, entity word and target box.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectInput {
    pub image: Tensor,
    pub entity: TokenId,
    pub bbox: BoxNorm,
}

/// Image condition `c_i` with `N = n·n_t` tokens.
#[derive(Clone, Debug)]
pub struct ImageCondition {
    pub tokens: Var,
    pub spans: Vec<(usize, usize)>,
    pub n: usize,
    pub grounding: Vec<GroundingSource>,
}

/// Whether each subject's queries get grounded.
pub enum GroundingPolicy<'a> {
    Always,
    Never,
    /// Drop grounding per subject with the configured probability.
    Random(&'a mut Rng),
}

pub fn project_subjects(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ResamplerConfig,
    patch: &PatchEncoderConfig,
    subjects: &[SubjectInput],
    rng: &mut Rng,
    training: bool,
) -> Result<ImageCondition> {
    let policy = if training { GroundingPolicy::Random(rng) } else { GroundingPolicy::Always };
    project_subjects_with(tape, store, cfg, patch, subjects, policy)
}

pub fn project_subjects_with(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ResamplerConfig,
    patch: &PatchEncoderConfig,
    subjects: &[SubjectInput],
    mut policy: GroundingPolicy<'_>,
) -> Result<ImageCondition> {
    ensure!(!subjects.is_empty(), Contract, "at least one subject is required");
    ensure!(subjects.len() <= MAX_SUBJECTS, Contract, "{} subjects exceed the maximum of {MAX_SUBJECTS}", subjects.len());
    let mut blocks = Vec::with_capacity(subjects.len());
    let mut spans = Vec::with_capacity(subjects.len());
    let mut sources = Vec::with_capacity(subjects.len());
    for (j, s) in subjects.iter().enumerate() {
        let use_grounding = match &mut policy {
            GroundingPolicy::Always => true,
            GroundingPolicy::Never => false,
            GroundingPolicy::Random(rng) => rng.uniform() >= cfg.grounding_drop_prob,
        };
        let tokens = match cfg.projector {
            ProjectorKind::GroundingResampler => {
                let g = build_grounding_tokens(tape, store, cfg, s.entity, &s.bbox, use_grounding)?;
                sources.push(g.source);
                resample_subject(tape, store, cfg, patch, &s.image, Some(&g))?
            }
            ProjectorKind::Linear => {
                sources.push(GroundingSource::LearnedBase);
                resample_subject(tape, store, cfg, patch, &s.image, None)?
            }
        };
        blocks.push(tokens);
        spans.push((j * cfg.n_t, (j + 1) * cfg.n_t));
    }
    let tokens = if blocks.len() == 1 { blocks[0] } else { tape.concat_rows(&blocks)? };
    Ok(ImageCondition { tokens, spans, n: subjects.len(), grounding: sources })
}
