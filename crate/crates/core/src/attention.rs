//! Decoupled text/image cross-attention with per-subject box masks, dummy
//! background tokens and background zeroing; the attention-map loss; and
//! attribution heatmaps.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{ensure, Error, Result};
use crate::geometry::BoxNorm;
use crate::layers::{self, init_linear, init_norm, linear, multi_head_attention};
use crate::params::{ParamGroup, ParamStore};
use crate::rng::Rng;
use crate::tensor::{AdditiveMask, MaskEntry, Tensor};

/// `M_j`: which latent cells may attend to subject `j`'s `n_t` tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectKeyMask {
    pub bbox: BoxNorm,
    pub latent_h: usize,
    pub latent_w: usize,
    pub n_t: usize,
    cells: Vec<bool>,
}

impl SubjectKeyMask {
    /// Row-major cell membership: `true` means unmasked.
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }

    pub fn is_open(&self, cell: usize) -> bool {
        self.cells[cell]
    }

    /// The mask as an `HW × n_t` sentinel grid.
    pub fn grid(&self) -> AdditiveMask {
        let mut m = AdditiveMask::open(self.cells.len(), self.n_t);
        for (cell, &open) in self.cells.iter().enumerate() {
            if !open {
                (0..self.n_t).for_each(|k| m.set(cell, k, MaskEntry::Blocked));
            }
        }
        m
    }
}

pub fn build_subject_mask(bbox: BoxNorm, latent_h: usize, latent_w: usize, n_t: usize) -> Result<SubjectKeyMask> {
    ensure!(latent_h >= 1 && latent_w >= 1, Contract, "latent grid {latent_h}×{latent_w} is empty");
    Ok(SubjectKeyMask { bbox, latent_h, latent_w, n_t, cells: bbox.cell_mask(latent_h, latent_w) })
}

/// `M` over keys `[dummy ∥ subject tokens]` plus `M_bg`.
#[derive(Clone, Debug, PartialEq)]
pub struct AssembledMask {
    pub key_mask: AdditiveMask,
    /// 1 outside every box, 0 inside any box.
    pub bg_mask: Vec<f64>,
    pub dummy_count: usize,
    pub subjects: Vec<SubjectKeyMask>,
}

impl AssembledMask {
    pub fn n_t(&self) -> usize {
        self.subjects[0].n_t
    }

    pub fn cells(&self) -> usize {
        self.bg_mask.len()
    }

    /// Key columns of subject `j` in the image-branch attention map.
    pub fn subject_columns(&self, j: usize) -> std::ops::Range<usize> {
        let start = self.dummy_count + j * self.n_t();
        start..start + self.n_t()
    }

    /// Same boxes, different dummy block size.
    pub fn with_dummy_count(&self, dummy_count: usize) -> AssembledMask {
        let boxes: Vec<BoxNorm> = self.subjects.iter().map(|s| s.bbox).collect();
        let s = &self.subjects[0];
        assemble_masks(&boxes, s.latent_h, s.latent_w, s.n_t, dummy_count).expect("boxes were already validated")
    }
}

pub fn assemble_masks(
    boxes: &[BoxNorm],
    latent_h: usize,
    latent_w: usize,
    n_t: usize,
    dummy_count: usize,
) -> Result<AssembledMask> {
    ensure!(!boxes.is_empty(), Contract, "mask assembly needs at least one box");
    ensure!(boxes.len() <= crate::resampler::MAX_SUBJECTS, Contract, "{} boxes exceed the subject limit", boxes.len());
    ensure!(n_t >= 1, Contract, "n_t must be at least 1");
    let subjects = boxes
        .iter()
        .map(|b| build_subject_mask(*b, latent_h, latent_w, n_t))
        .collect::<Result<Vec<_>>>()?;
    let hw = latent_h * latent_w;
    let cols = dummy_count + boxes.len() * n_t;
    let mut key_mask = AdditiveMask::open(hw, cols);
    let mut bg_mask = vec![1.0; hw];
    for (j, s) in subjects.iter().enumerate() {
        for cell in 0..hw {
            if s.is_open(cell) {
                bg_mask[cell] = 0.0;
            } else {
                for k in 0..n_t {
                    key_mask.set(cell, dummy_count + j * n_t + k, MaskEntry::Blocked);
                }
            }
        }
    }
    Ok(AssembledMask { key_mask, bg_mask, dummy_count, subjects })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAttentionConfig {
    pub d_model: usize,
    pub d_text: usize,
    pub d_cond: usize,
    pub heads: usize,
    pub dummy_count: usize,
    /// Layer-normalize `z` before the query projection.
    pub pre_norm: bool,
}

/// Parameters under `prefix`: text-branch `to_q`, `to_k_txt`, `to_v_txt`,
/// `to_out` (and `norm`) belong to `text_group`; image-branch keys, values
/// and dummy tokens are adapter parameters.
pub fn init_cross_attention(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &CrossAttentionConfig,
    text_group: ParamGroup,
    rng: &mut Rng,
) -> Result<()> {
    ensure!(cfg.heads >= 1 && cfg.d_model.is_multiple_of(cfg.heads), Config, "{} channels do not split into {} heads", cfg.d_model, cfg.heads);
    let d = cfg.d_model;
    if cfg.pre_norm {
        init_norm(store, &format!("{prefix}.norm"), d, text_group)?;
    }
    init_linear(store, &format!("{prefix}.to_q"), d, d, false, text_group, rng)?;
    init_linear(store, &format!("{prefix}.to_k_txt"), cfg.d_text, d, false, text_group, rng)?;
    init_linear(store, &format!("{prefix}.to_v_txt"), cfg.d_text, d, false, text_group, rng)?;
    init_linear(store, &format!("{prefix}.to_out"), d, d, false, text_group, rng)?;
    init_linear(store, &format!("{prefix}.to_k_img"), cfg.d_cond, d, false, ParamGroup::Adapter, rng)?;
    init_linear(store, &format!("{prefix}.to_v_img"), cfg.d_cond, d, false, ParamGroup::Adapter, rng)?;
    if cfg.dummy_count > 0 {
        store.insert(
            &format!("{prefix}.dummy"),
            Tensor::randn(vec![cfg.dummy_count, cfg.d_cond], 1.0, rng),
            ParamGroup::Adapter,
        )?;
    }
    Ok(())
}

/// Image-branch input of one attention layer.
#[derive(Clone, Copy)]
pub struct ImageBranch<'a> {
    pub tokens: Var,
    /// `Some` enables masked multi-subject attention: dummy keys, box masks
    /// and background zeroing. `None` is plain decoupled attention.
    pub masks: Option<&'a AssembledMask>,
    pub gamma: f64,
}

pub struct CrossAttentionOutput {
    pub z_out: Var,
    /// Head-averaged text attention, `HW × L`.
    pub a_text: Var,
    /// Head-averaged image attention, `HW × keys`.
    pub a_img: Option<Var>,
    /// `z_img` after background zeroing, before the `γ` scale.
    pub z_img: Option<Var>,
    pub z_txt: Var,
    pub degenerate_rows: usize,
}

/// `z_out = z + z_txt + γ·z_img` with `z_img = (1 − M_bg)·ẑ_img` when masked.
pub fn dual_cross_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    cfg: &CrossAttentionConfig,
    z: Var,
    c_t: Var,
    image: Option<ImageBranch<'_>>,
) -> Result<CrossAttentionOutput> {
    let (hw, d) = tape.shape(z);
    ensure!(d == cfg.d_model, Shape, "latent has {d} channels, layer expects {}", cfg.d_model);
    ensure!(tape.shape(c_t).1 == cfg.d_text, Shape, "text condition has {} columns, expected {}", tape.shape(c_t).1, cfg.d_text);
    let zq = if cfg.pre_norm { layers::norm(tape, store, &format!("{prefix}.norm"), z)? } else { z };
    let q = linear(tape, store, &format!("{prefix}.to_q"), zq)?;

    let k_t = linear(tape, store, &format!("{prefix}.to_k_txt"), c_t)?;
    let v_t = linear(tape, store, &format!("{prefix}.to_v_txt"), c_t)?;
    let text = multi_head_attention(tape, q, k_t, v_t, cfg.heads, None)?;
    let z_txt = linear(tape, store, &format!("{prefix}.to_out"), text.out)?;
    let mut degenerate_rows = text.degenerate_rows;
    let base = tape.add(z, z_txt)?;

    let Some(img) = image else {
        return Ok(CrossAttentionOutput { z_out: base, a_text: text.probs, a_img: None, z_img: None, z_txt, degenerate_rows });
    };
    ensure!(tape.shape(img.tokens).1 == cfg.d_cond, Shape, "image condition has {} columns, expected {}", tape.shape(img.tokens).1, cfg.d_cond);
    let keys = match img.masks {
        Some(m) => {
            ensure!(m.cells() == hw, Shape, "mask grid has {} cells, latent has {hw}", m.cells());
            ensure!(m.dummy_count == cfg.dummy_count, Contract, "mask built for {} dummies, layer has {}", m.dummy_count, cfg.dummy_count);
            ensure!(
                m.key_mask.cols() == m.dummy_count + tape.shape(img.tokens).0,
                Shape,
                "mask covers {} keys, image branch has {} dummies + {} tokens",
                m.key_mask.cols(),
                m.dummy_count,
                tape.shape(img.tokens).0
            );
            if cfg.dummy_count > 0 {
                let dummy = tape.param(store, &format!("{prefix}.dummy"))?;
                tape.concat_rows(&[dummy, img.tokens])?
            } else {
                img.tokens
            }
        }
        None => img.tokens,
    };
    let k_i = linear(tape, store, &format!("{prefix}.to_k_img"), keys)?;
    let v_i = linear(tape, store, &format!("{prefix}.to_v_img"), keys)?;
    let attn = multi_head_attention(tape, q, k_i, v_i, cfg.heads, img.masks.map(|m| &m.key_mask))?;
    degenerate_rows += attn.degenerate_rows;
    let z_hat = linear(tape, store, &format!("{prefix}.to_out"), attn.out)?;
    let z_img = match img.masks {
        Some(m) => {
            let keep = m.bg_mask.iter().map(|b| 1.0 - b).collect();
            tape.scale_rows(z_hat, keep)?
        }
        None => z_hat,
    };
    let z_out = if img.gamma == 0.0 {
        base
    } else {
        let scaled = tape.scale(z_img, img.gamma);
        tape.add(base, scaled)?
    };
    Ok(CrossAttentionOutput { z_out, a_text: text.probs, a_img: Some(attn.probs), z_img: Some(z_img), z_txt, degenerate_rows })
}

/// Where one subject's attention mass should land: the cells of its box and
/// the attention-map columns of its tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectRegion {
    pub cells: Vec<bool>,
    pub columns: Vec<usize>,
}

pub struct AttentionLoss {
    pub loss: Var,
    /// `(map index, subject index)` pairs with zero attention mass.
    pub zero_mass: Vec<(usize, usize)>,
}

/// Mean over maps and subjects of `(1 − in-box mass / total mass)²`.
/// A subject with no mass at all contributes 1.
pub fn attention_map_loss(tape: &mut Tape, maps: &[Var], regions: &[SubjectRegion]) -> Result<AttentionLoss> {
    ensure!(!maps.is_empty() && !regions.is_empty(), Contract, "attention loss needs at least one map and one subject");
    let mut terms = Vec::with_capacity(maps.len() * regions.len());
    let mut zero_mass = Vec::new();
    for (li, &a) in maps.iter().enumerate() {
        let (hw, keys) = tape.shape(a);
        for (j, r) in regions.iter().enumerate() {
            ensure!(r.cells.len() == hw, Shape, "region has {} cells, map has {hw} rows", r.cells.len());
            ensure!(!r.columns.is_empty(), Contract, "subject {j} has no token columns");
            let mut select = vec![0.0; keys];
            for &c in &r.columns {
                ensure!(c < keys, Contract, "token column {c} out of range for {keys} keys");
                select[c] = 1.0;
            }
            let select = tape.constant_raw(keys, 1, select)?;
            let per_cell = tape.matmul(a, select)?;
            let total = tape.sum(per_cell);
            if tape.scalar(total) == 0.0 {
                zero_mass.push((li, j));
                terms.push(tape.constant_raw(1, 1, vec![1.0])?);
                continue;
            }
            let inside = tape.scale_rows(per_cell, r.cells.iter().map(|&c| if c { 1.0 } else { 0.0 }).collect())?;
            let inside = tape.sum(inside);
            let ratio = tape.div(inside, total)?;
            let gap = tape.scale(ratio, -1.0);
            let gap = tape.add_scalar(gap, 1.0);
            terms.push(tape.square(gap));
        }
    }
    let all = tape.concat_rows(&terms)?;
    Ok(AttentionLoss { loss: tape.mean(all), zero_mass })
}

/// Mean of the selected attention columns on the latent grid, min-max
/// normalized to `[0, 1]`. A constant map comes back as zeros.
pub fn attribution_heatmap(map: &Tensor, columns: &[usize], latent_h: usize, latent_w: usize) -> Result<Tensor> {
    ensure!(!columns.is_empty(), Contract, "heatmap needs at least one token column");
    ensure!(map.rows() == latent_h * latent_w, Shape, "map has {} rows for a {latent_h}×{latent_w} grid", map.rows());
    let keys = map.cols();
    if let Some(&c) = columns.iter().find(|&&c| c >= keys) {
        return Err(Error::Contract(format!("token column {c} out of range for {keys} keys")));
    }
    let n = columns.len() as f64;
    let mean: Vec<f64> = (0..map.rows())
        .map(|r| columns.iter().map(|&c| map.at(r, c)).sum::<f64>() / n)
        .collect();
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let out = if hi > lo { mean.iter().map(|v| (v - lo) / (hi - lo)).collect() } else { vec![0.0; mean.len()] };
    Tensor::new(vec![latent_h, latent_w], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(x0: f64, y0: f64, x1: f64, y1: f64) -> BoxNorm {
        BoxNorm::new(x0, y0, x1, y1).unwrap()
    }

    #[test]
    fn full_box_unmasks_everything() {
        let m = build_subject_mask(BoxNorm::FULL, 5, 3, 2).unwrap();
        assert!(m.cells().iter().all(|&c| c));
        assert!(m.grid().row(7).iter().all(|&e| e == MaskEntry::Open));
    }

    #[test]
    fn center_box_on_4x4_grid() {
        let m = build_subject_mask(BoxNorm::CENTER, 4, 4, 4).unwrap();
        let mut expected = [false; 16];
        for y in 0..4 {
            for x in 0..4 {
                let (cx, cy) = ((x as f64 + 0.5) / 4.0, (y as f64 + 0.5) / 4.0);
                expected[y * 4 + x] = (0.25..0.75).contains(&cx) && (0.25..0.75).contains(&cy);
            }
        }
        assert_eq!(m.cells(), &expected[..]);
        assert_eq!(m.cells().iter().filter(|&&c| c).count(), 4);
        for (cell, open) in [(5, true), (6, true), (9, true), (10, true), (0, false)] {
            assert_eq!(m.is_open(cell), open);
        }
    }

    #[test]
    fn disjoint_boxes_have_disjoint_cells() {
        let a = build_subject_mask(BoxNorm::CENTER, 8, 8, 1).unwrap();
        let c = build_subject_mask(b(0.75, 0.25, 1.0, 0.75), 8, 8, 1).unwrap();
        assert!(a.cells().iter().zip(c.cells()).all(|(x, y)| !(x & y)));
    }

    #[test]
    fn assembled_full_box_has_no_background() {
        let m = assemble_masks(&[BoxNorm::FULL], 4, 4, 2, 2).unwrap();
        assert!(m.bg_mask.iter().all(|&v| v == 0.0));
        assert!(assemble_masks(&[], 4, 4, 2, 2).is_err());
    }

    #[test]
    fn single_cell_grid_outside_box() {
        let m = assemble_masks(&[b(0.0, 0.0, 0.4, 0.4)], 1, 1, 3, 2).unwrap();
        assert_eq!(m.bg_mask, vec![1.0]);
        let row = m.key_mask.row(0);
        assert_eq!(&row[..2], &[MaskEntry::Open; 2]);
        assert_eq!(&row[2..], &[MaskEntry::Blocked; 3]);
    }

    #[test]
    fn living_pair_background() {
        let m = assemble_masks(&[b(0.0, 0.25, 0.5, 0.75), b(0.5, 0.25, 1.0, 0.75)], 8, 8, 4, 4).unwrap();
        for y in 0..8 {
            let inside = (0.25..0.75).contains(&((y as f64 + 0.5) / 8.0));
            for x in 0..8 {
                assert_eq!(m.bg_mask[y * 8 + x], if inside { 0.0 } else { 1.0 });
            }
        }
        assert_eq!(m.bg_mask.iter().filter(|&&v| v == 0.0).count(), 32);
        assert_eq!(m.subject_columns(1), 8..12);
    }

    fn uniform_map(tape: &mut Tape, hw: usize, keys: usize) -> Var {
        tape.constant_raw(hw, keys, vec![1.0 / keys as f64; hw * keys]).unwrap()
    }

    #[test]
    fn attention_loss_values() {
        let mut tape = Tape::new();
        let quarter = b(0.0, 0.0, 0.5, 0.5).cell_mask(8, 8);
        assert_eq!(quarter.iter().filter(|&&c| c).count(), 16);
        let a = uniform_map(&mut tape, 64, 4);
        let r = SubjectRegion { cells: quarter.clone(), columns: vec![0, 1] };
        let l = attention_map_loss(&mut tape, &[a], std::slice::from_ref(&r)).unwrap();
        assert!((tape.scalar(l.loss) - 0.5625).abs() < 1e-15);

        let mut inside = vec![0.0; 64 * 4];
        for (cell, &c) in quarter.iter().enumerate() {
            if c {
                inside[cell * 4 + 2] = 1.0;
            }
        }
        let perfect = tape.constant_raw(64, 4, inside).unwrap();
        let p = SubjectRegion { cells: quarter, columns: vec![2] };
        let l = attention_map_loss(&mut tape, &[perfect], std::slice::from_ref(&p)).unwrap();
        assert_eq!(tape.scalar(l.loss), 0.0);

        let both = attention_map_loss(&mut tape, &[perfect], &[p, SubjectRegion { columns: vec![0], ..r }]).unwrap();
        // Column 0 carries no mass on this map.
        assert_eq!(tape.scalar(both.loss), 0.5);
        assert_eq!(both.zero_mass, vec![(0, 1)]);
    }

    #[test]
    fn zero_mass_is_flagged() {
        let mut tape = Tape::new();
        let a = tape.constant_raw(4, 2, vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let r = SubjectRegion { cells: vec![true, false, false, false], columns: vec![1] };
        let l = attention_map_loss(&mut tape, &[a], &[r]).unwrap();
        assert_eq!(tape.scalar(l.loss), 1.0);
        assert_eq!(l.zero_mass, vec![(0, 0)]);
    }

    #[test]
    fn heatmap_cases() {
        let uniform = Tensor::full(vec![16, 3], 1.0 / 3.0);
        assert!(attribution_heatmap(&uniform, &[1], 4, 4).unwrap().data().iter().all(|&v| v == 0.0));
        let mut onehot = Tensor::zeros(vec![16, 2]);
        onehot.data_mut()[(3 * 4 + 2) * 2] = 1.0;
        let h = attribution_heatmap(&onehot, &[0], 4, 4).unwrap();
        for (i, &v) in h.data().iter().enumerate() {
            assert_eq!(v, if i == 3 * 4 + 2 { 1.0 } else { 0.0 });
        }
        assert!(attribution_heatmap(&onehot, &[], 4, 4).is_err());
        assert!(attribution_heatmap(&onehot, &[2], 4, 4).is_err());
    }
}
