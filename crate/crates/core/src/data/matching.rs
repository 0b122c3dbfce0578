use crate::autograd::Tape;
use crate::embedding::{encode_image_patches, init_patch_encoder, PatchEncoderConfig};
use crate::error::{ensure, Result};
use crate::geometry::BoxNorm;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::hungarian::hungarian_match;
use super::sample::{MatchedSample, MatchedSubject};
use super::scene::{Annotation, ScenePair};

/// Box region of an `H×W×3` image resampled (nearest) to `size × size`.
pub fn crop_resize(image: &Tensor, bbox: &BoxNorm, size: usize) -> Result<Tensor> {
    let s = image.shape();
    ensure!(s.len() == 3 && s[2] == 3, Shape, "expected an H×W×3 image, got {:?}", s);
    ensure!(size >= 1, Contract, "crop size must be positive");
    let (h, w) = (s[0], s[1]);
    let (x0, y0, x1, y1) = bbox.pixel_bounds(w, h);
    let (cw, ch) = (x1 - x0, y1 - y0);
    let px = image.data();
    let mut out = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        let sy = y0 + (y * ch) / size;
        for x in 0..size {
            let sx = x0 + (x * cw) / size;
            let base = (sy * w + sx) * 3;
            out.extend_from_slice(&px[base..base + 3]);
        }
    }
    Tensor::new(vec![size, size, 3], out)
}

/// Frozen patch encoder used to compare subject crops across frames.
#[derive(Clone, Debug)]
pub struct PatchEmbedder {
    store: ParamStore,
    cfg: PatchEncoderConfig,
}

impl PatchEmbedder {
    pub fn new(cfg: PatchEncoderConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        init_patch_encoder(&mut store, &cfg, &mut Rng::new(seed))?;
        store.set_all_trainable(false);
        Ok(PatchEmbedder { store, cfg })
    }

    pub fn crop_size(&self) -> usize {
        self.cfg.crop_size
    }

    /// Mean over patch embeddings of a `crop_size`-sided crop.
    pub fn embed(&self, crop: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let e = encode_image_patches(&mut tape, &self.store, &self.cfg, crop)?;
        let (rows, cols) = tape.shape(e);
        let v = tape.value(e);
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, x) in mean.iter_mut().zip(&v[r * cols..(r + 1) * cols]) {
                *m += x;
            }
        }
        Ok(mean.into_iter().map(|m| m / rows as f64).collect())
    }
}

pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Correspondence {
    /// Accepted `(reference, target)` index pairs, sorted by target.
    pub pairs: Vec<(usize, usize)>,
    /// Targets without an accepted partner.
    pub unmatched_targets: Vec<usize>,
    pub unmatched_references: Vec<usize>,
}

impl Correspondence {
    pub fn reference_for(&self, target: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == target).map(|p| p.0)
    }
}

/// Hungarian assignment on cosine distance between embeddings; pairs whose
/// distance exceeds `threshold` are rejected.
pub fn match_embeddings(reference: &[Vec<f64>], target: &[Vec<f64>], threshold: f64) -> Result<Correspondence> {
    let (n, m) = (reference.len(), target.len());
    let cost: Vec<f64> = reference.iter().flat_map(|r| target.iter().map(move |t| cosine_distance(r, t))).collect();
    let assignment = hungarian_match(&cost, n, m)?;
    let mut pairs: Vec<(usize, usize)> =
        assignment.pairs.into_iter().filter(|&(i, j)| cost[i * m + j] <= threshold).collect();
    pairs.sort_by_key(|p| p.1);
    let unmatched_targets = (0..m).filter(|j| !pairs.iter().any(|p| p.1 == *j)).collect();
    let unmatched_references = (0..n).filter(|i| !pairs.iter().any(|p| p.0 == *i)).collect();
    Ok(Correspondence { pairs, unmatched_targets, unmatched_references })
}

/// Match annotated subjects between two frames by their crop embeddings.
pub fn match_subjects<F>(
    reference: (&Tensor, &[Annotation]),
    target: (&Tensor, &[Annotation]),
    crop_size: usize,
    threshold: f64,
    mut embed: F,
) -> Result<Correspondence>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
{
    let mut embed_all = |image: &Tensor, anns: &[Annotation]| -> Result<Vec<Vec<f64>>> {
        anns.iter().map(|a| embed(&crop_resize(image, &a.bbox, crop_size)?)).collect()
    };
    let r = embed_all(reference.0, reference.1)?;
    let t = embed_all(target.0, target.1)?;
    match_embeddings(&r, &t, threshold)
}

/// Matched sample in target order. Crops come from the reference frame,
/// or from the target frame itself when the subject went unmatched.
pub fn build_matched_sample(pair: &ScenePair, corr: &Correspondence, crop_size: usize) -> Result<MatchedSample> {
    let subjects = pair
        .target
        .annotations
        .iter()
        .enumerate()
        .map(|(j, a)| {
            let (crop, from_target) = match corr.reference_for(j) {
                Some(i) => (crop_resize(&pair.reference.image, &pair.reference.annotations[i].bbox, crop_size)?, false),
                None => (crop_resize(&pair.target.image, &a.bbox, crop_size)?, true),
            };
            Ok(MatchedSubject { crop, shape: a.shape, color: a.color, bbox: a.bbox, from_target })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MatchedSample { target: pair.target.image.clone(), background: pair.spec.background, subjects })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_of_full_box_keeps_size() {
        let mut rng = Rng::new(1);
        let img = Tensor::new(vec![4, 4, 3], (0..48).map(|_| rng.uniform()).collect()).unwrap();
        assert_eq!(crop_resize(&img, &BoxNorm::FULL, 4).unwrap(), img);
        let c = crop_resize(&img, &BoxNorm::new(0.5, 0.5, 1.0, 1.0).unwrap(), 4).unwrap();
        assert_eq!(&c.data()[..3], &img.data()[(2 * 4 + 2) * 3..(2 * 4 + 2) * 3 + 3]);
    }

    #[test]
    fn threshold_rejects_far_pairs() {
        let r = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let t = vec![vec![0.0, 1.0], vec![0.6, -0.8]];
        let c = match_embeddings(&r, &t, 0.3).unwrap();
        assert_eq!(c.pairs, vec![(1, 0)]);
        assert_eq!(c.unmatched_targets, vec![1]);
        assert_eq!(c.unmatched_references, vec![0]);
    }

    #[test]
    fn zero_vector_is_far() {
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }
}
