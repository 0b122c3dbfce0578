use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::error::{ensure, Result};
use crate::geometry::BoxNorm;
use crate::tensor::Tensor;

pub const COLOR_BINS: usize = 4;
pub const ORIENTATION_BINS: usize = 8;
pub const FEATURE_LEN: usize = COLOR_BINS * COLOR_BINS * COLOR_BINS + ORIENTATION_BINS;

fn image_dims(image: &Tensor) -> Result<(usize, usize)> {
    let s = image.shape();
    ensure!(s.len() == 3 && s[2] == 3, Shape, "expected an H×W×3 image, got {:?}", s);
    Ok((s[0], s[1]))
}

fn bin(v: f64) -> usize {
    ((v.clamp(0.0, 1.0) * COLOR_BINS as f64) as usize).min(COLOR_BINS - 1)
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// Color histogram (4×4×4 bins, first channel slowest) followed by an
/// 8-bin histogram of gradient orientation on the channel-mean image,
/// weighted by gradient magnitude. Each block is L2-normalized and scaled
/// by 1/√2, then the whole vector is normalized again (a flat image has no
/// gradient block and ends up color-only).
pub fn image_features(image: &Tensor) -> Result<Vec<f64>> {
    let (h, w) = image_dims(image)?;
    ensure!(h * w >= 2, Contract, "image of {h}×{w} pixels is too small to describe");
    let px = image.data();
    let mut color = vec![0.0; COLOR_BINS * COLOR_BINS * COLOR_BINS];
    for p in px.chunks_exact(3) {
        color[(bin(p[0]) * COLOR_BINS + bin(p[1])) * COLOR_BINS + bin(p[2])] += 1.0;
    }
    let gray: Vec<f64> = px.chunks_exact(3).map(|p| (p[0] + p[1] + p[2]) / 3.0).collect();
    let at = |y: usize, x: usize| gray[y * w + x];
    let mut orient = vec![0.0; ORIENTATION_BINS];
    for y in 0..h {
        for x in 0..w {
            let gx = at(y, (x + 1).min(w - 1)) - at(y, x.saturating_sub(1));
            let gy = at((y + 1).min(h - 1), x) - at(y.saturating_sub(1), x);
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(2.0 * PI);
            let b = ((angle / (2.0 * PI) * ORIENTATION_BINS as f64) as usize).min(ORIENTATION_BINS - 1);
            orient[b] += mag;
        }
    }
    normalize(&mut color);
    normalize(&mut orient);
    let mut out: Vec<f64> = color.into_iter().chain(orient).map(|v| v * FRAC_1_SQRT_2).collect();
    normalize(&mut out);
    Ok(out)
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Pixels of `image` under `bbox`, without resampling.
pub fn crop_box(image: &Tensor, bbox: &BoxNorm) -> Result<Tensor> {
    let (h, w) = image_dims(image)?;
    let (x0, y0, x1, y1) = bbox.pixel_bounds(w, h);
    let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0) * 3);
    for y in y0..y1 {
        out.extend_from_slice(&image.data()[(y * w + x0) * 3..(y * w + x1) * 3]);
    }
    Tensor::new(vec![y1 - y0, x1 - x0, 3], out)
}

/// Feature cosine between the boxed region of a generated image and a
/// reference crop.
pub fn subject_fidelity(generated: &Tensor, reference: &Tensor, bbox: &BoxNorm) -> Result<f64> {
    let crop = crop_box(generated, bbox)?;
    ensure!(crop.shape()[0] * crop.shape()[1] > 1, Contract, "box {:?} covers at most one pixel", bbox.coords());
    Ok(cosine_similarity(&image_features(&crop)?, &image_features(reference)?))
}

/// Product of per-subject scores, each clamped to `[0, 1]` first.
pub fn m_dino(per_subject: &[f64]) -> Result<f64> {
    ensure!(!per_subject.is_empty(), Contract, "M-DINO needs at least one subject score");
    Ok(per_subject.iter().map(|s| s.clamp(0.0, 1.0)).product())
}
