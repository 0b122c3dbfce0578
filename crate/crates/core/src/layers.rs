//! Small building blocks shared by the encoders, the resampler and the denoiser.

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::AdditiveMask;

pub(crate) fn init_linear(
    store: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    group: ParamGroup,
    rng: &mut Rng,
) -> Result<()> {
    store.insert_weight(&format!("{prefix}.w"), fan_in, fan_out, group, rng)?;
    if bias {
        store.insert_zeros(&format!("{prefix}.b"), vec![1, fan_out], group)?;
    }
    Ok(())
}

/// `x · W (+ b)`; the bias is used when the store has one.
pub(crate) fn linear(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(store, &format!("{prefix}.w"))?;
    let y = tape.matmul(x, w)?;
    let bias = format!("{prefix}.b");
    if store.id(&bias).is_ok() {
        let b = tape.param(store, &bias)?;
        tape.add_row(y, b)
    } else {
        Ok(y)
    }
}

pub(crate) fn init_norm(store: &mut ParamStore, prefix: &str, dim: usize, group: ParamGroup) -> Result<()> {
    store.insert_ones(&format!("{prefix}.gain"), vec![1, dim], group)?;
    store.insert_zeros(&format!("{prefix}.bias"), vec![1, dim], group)?;
    Ok(())
}

/// Row-wise layer normalization with learned gain and bias.
pub(crate) fn norm(tape: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let n = tape.layer_norm(x);
    let gain = tape.param(store, &format!("{prefix}.gain"))?;
    let bias = tape.param(store, &format!("{prefix}.bias"))?;
    let scaled = tape.mul_row(n, gain)?;
    tape.add_row(scaled, bias)
}

pub(crate) struct HeadsOutput {
    /// Concatenated head outputs, `rows(q) × d`.
    pub out: Var,
    /// Attention probabilities averaged over heads, `rows(q) × rows(k)`.
    pub probs: Var,
    pub degenerate_rows: usize,
}

/// Multi-head scaled dot-product attention over pre-projected `q`, `k`, `v`.
pub(crate) fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    mask: Option<&AdditiveMask>,
) -> Result<HeadsOutput> {
    let (_, d) = tape.shape(q);
    ensure!(heads >= 1 && d % heads == 0, Shape, "{d} channels do not split into {heads} heads");
    ensure!(tape.shape(k).1 == d && tape.shape(v).1 == d, Shape, "q/k/v widths differ");
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut prob_sum: Option<Var> = None;
    let mut degenerate = 0;
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, (h + 1) * dh)?,
                tape.slice_cols(k, h * dh, (h + 1) * dh)?,
                tape.slice_cols(v, h * dh, (h + 1) * dh)?,
            )
        };
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let (p, deg) = tape.masked_softmax(scores, mask)?;
        degenerate += deg.len();
        outs.push(tape.matmul(p, vh)?);
        prob_sum = Some(match prob_sum {
            None => p,
            Some(s) => tape.add(s, p)?,
        });
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    let probs = prob_sum.expect("at least one head");
    let probs = if heads == 1 { probs } else { tape.scale(probs, 1.0 / heads as f64) };
    Ok(HeadsOutput { out, probs, degenerate_rows: degenerate })
}

/// Sinusoidal code of a scalar position: `[sin(p·f_i)…, cos(p·f_i)…]` with
/// `f_i = 10000^(-2i/dim)`.
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = 10000f64.powf(-2.0 * i as f64 / dim as f64);
        out[i] = (position * freq).sin();
        out[half + i] = (position * freq).cos();
    }
    out
}
