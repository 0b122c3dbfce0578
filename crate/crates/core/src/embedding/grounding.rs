use super::fourier::fourier_box_embedding;
use super::text::entity_embedding;
use super::vocab::TokenId;
use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::geometry::BoxNorm;
use crate::layers::{init_linear, linear};
use crate::params::{ParamGroup, ParamStore};
use crate::resampler::ResamplerConfig;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroundingSource {
    Grounded,
    LearnedBase,
}

/// Resampler query initialization for one subject: `n_t × d_q`.
#[derive(Clone, Copy, Debug)]
pub struct GroundingTokens {
    pub tokens: Var,
    pub source: GroundingSource,
}

pub(crate) const BASE_QUERIES: &str = "resampler.queries";

pub fn init_grounding(store: &mut ParamStore, cfg: &ResamplerConfig, text_dim: usize, rng: &mut Rng) -> Result<()> {
    let g = ParamGroup::Adapter;
    store.insert(
        BASE_QUERIES,
        crate::tensor::Tensor::randn(vec![cfg.n_t, cfg.d_q], 1.0 / (cfg.d_q as f64).sqrt(), rng),
        g,
    )?;
    init_linear(store, "grounding.mlp1", text_dim + 8 * cfg.num_freqs, cfg.grounding_hidden, true, g, rng)?;
    init_linear(store, "grounding.mlp2", cfg.grounding_hidden, cfg.d_q, true, g, rng)?;
    Ok(())
}

/// With grounding, every learned base query is offset by
/// `MLP([entity embedding ∥ Fourier(box)])`; without it, the base queries
/// are returned untouched.
pub fn build_grounding_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    cfg: &ResamplerConfig,
    entity: TokenId,
    b: &BoxNorm,
    use_grounding: bool,
) -> Result<GroundingTokens> {
    let base = tape.param(store, BASE_QUERIES)?;
    ensure!(tape.shape(base) == (cfg.n_t, cfg.d_q), Shape, "base queries do not match n_t × d_q");
    if !use_grounding {
        return Ok(GroundingTokens { tokens: base, source: GroundingSource::LearnedBase });
    }
    let e = entity_embedding(tape, store, entity)?;
    let f = fourier_box_embedding(b, cfg.num_freqs)?;
    let f = tape.constant_raw(1, f.len(), f)?;
    let x = tape.concat_cols(&[e, f])?;
    let h = linear(tape, store, "grounding.mlp1", x)?;
    let h = tape.silu(h);
    let offset = linear(tape, store, "grounding.mlp2", h)?;
    let tokens = tape.add_row(base, offset)?;
    Ok(GroundingTokens { tokens, source: GroundingSource::Grounded })
}
