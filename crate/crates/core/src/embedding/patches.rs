use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Result};
use crate::layers::{self, init_linear, linear};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchEncoderConfig {
    pub patch: usize,
    pub dim: usize,
    /// Side length subject crops are resampled to before encoding.
    pub crop_size: usize,
}

impl Default for PatchEncoderConfig {
    fn default() -> Self {
        PatchEncoderConfig { patch: 4, dim: 32, crop_size: 16 }
    }
}

pub fn init_patch_encoder(store: &mut ParamStore, cfg: &PatchEncoderConfig, rng: &mut Rng) -> Result<()> {
    init_linear(store, "image.patch_proj", cfg.patch * cfg.patch * 3, cfg.dim, true, ParamGroup::Encoder, rng)
}

/// Flattened non-overlapping patches of an `H×W×3` image, each patch in
/// `(row, col, channel)` order, with pixel values mapped to `[-1, 1]`.
pub fn patch_grid(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    ensure!(s.len() == 3 && s[2] == 3, Shape, "expected an H×W×3 image, got {:?}", s);
    let (h, w) = (s[0], s[1]);
    ensure!(patch > 0 && h % patch == 0 && w % patch == 0, Shape, "{h}×{w} image is not divisible into {patch}×{patch} patches");
    let (ph, pw) = (h / patch, w / patch);
    let dim = patch * patch * 3;
    let mut out = Vec::with_capacity(ph * pw * dim);
    let px = image.data();
    for gy in 0..ph {
        for gx in 0..pw {
            for y in 0..patch {
                for x in 0..patch {
                    let base = ((gy * patch + y) * w + gx * patch + x) * 3;
                    out.extend(px[base..base + 3].iter().map(|v| 2.0 * v - 1.0));
                }
            }
        }
    }
    Tensor::new(vec![ph * pw, dim], out)
}

/// Linear patch projection plus sinusoidal patch-index codes: `P × dim`
/// with `P = (H/p)·(W/p)`.
pub fn encode_image_patches(tape: &mut Tape, store: &ParamStore, cfg: &PatchEncoderConfig, image: &Tensor) -> Result<Var> {
    let patches = patch_grid(image, cfg.patch)?;
    let n = patches.rows();
    let x = tape.constant(&patches);
    let proj = linear(tape, store, "image.patch_proj", x)?;
    let pos: Vec<f64> = (0..n).flat_map(|i| layers::sinusoidal(i as f64, cfg.dim)).collect();
    let pos = tape.constant_raw(n, cfg.dim, pos)?;
    tape.add(proj, pos)
}

/// Patch projection without position codes (the part that follows the
/// content of each patch).
#[cfg(test)]
pub(crate) fn project_patches(tape: &mut Tape, store: &ParamStore, cfg: &PatchEncoderConfig, image: &Tensor) -> Result<Var> {
    let patches = patch_grid(image, cfg.patch)?;
    let x = tape.constant(&patches);
    linear(tape, store, "image.patch_proj", x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn setup() -> (ParamStore, PatchEncoderConfig) {
        let cfg = PatchEncoderConfig::default();
        let mut store = ParamStore::new();
        init_patch_encoder(&mut store, &cfg, &mut Rng::new(4)).unwrap();
        let b = store.get_mut("image.patch_proj.b").unwrap();
        b.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = 0.01 * i as f64);
        (store, cfg)
    }

    #[test]
    fn eight_by_eight_gives_four_patches() {
        let (store, cfg) = setup();
        let mut tape = Tape::inference();
        let out = encode_image_patches(&mut tape, &store, &cfg, &Tensor::zeros(vec![8, 8, 3])).unwrap();
        assert_eq!(tape.shape(out), (4, cfg.dim));
    }

    #[test]
    fn zero_image_is_projected_zero_patch_plus_position() {
        let (store, cfg) = setup();
        let mut tape = Tape::inference();
        let out = encode_image_patches(&mut tape, &store, &cfg, &Tensor::zeros(vec![8, 8, 3])).unwrap();
        // A black pixel maps to -1 in every channel.
        let w = store.get("image.patch_proj.w").unwrap();
        let b = store.get("image.patch_proj.b").unwrap();
        let zero_patch = Tensor::full(vec![1, 48], -1.0);
        let projected = zero_patch.matmul(w).unwrap();
        for p in 0..4 {
            let pos = layers::sinusoidal(p as f64, cfg.dim);
            for j in 0..cfg.dim {
                let expected = projected.data()[j] + b.data()[j] + pos[j];
                assert!((tape.value(out)[p * cfg.dim + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn swapping_patches_swaps_pre_position_rows() {
        let (store, cfg) = setup();
        let mut rng = Rng::new(8);
        let img = Tensor::randn(vec![8, 8, 3], 0.3, &mut rng);
        let mut swapped = img.clone();
        // Swap patch (0,0) with patch (1,1).
        for y in 0..4 {
            for x in 0..4 {
                for c in 0..3 {
                    let a = (y * 8 + x) * 3 + c;
                    let b = ((y + 4) * 8 + x + 4) * 3 + c;
                    swapped.data_mut().swap(a, b);
                }
            }
        }
        let mut tape = Tape::inference();
        let pa = project_patches(&mut tape, &store, &cfg, &img).unwrap();
        let pb = project_patches(&mut tape, &store, &cfg, &swapped).unwrap();
        let (ra, rb) = (tape.tensor(pa), tape.tensor(pb));
        assert_eq!(ra.row(0), rb.row(3));
        assert_eq!(ra.row(3), rb.row(0));
        assert_eq!(ra.row(1), rb.row(1));
    }

    #[test]
    fn non_divisible_is_shape_error() {
        let (store, cfg) = setup();
        let mut tape = Tape::inference();
        let err = encode_image_patches(&mut tape, &store, &cfg, &Tensor::zeros(vec![6, 8, 3])).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }
}
