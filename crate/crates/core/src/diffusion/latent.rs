use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Fixed pixel ↔ latent mapping: `2x − 1` then `factor × factor` average
/// pooling; decoding upsamples by repetition and maps back with clamping.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentCodec {
    pub factor: usize,
}

impl LatentCodec {
    pub fn new(factor: usize) -> Result<Self> {
        ensure!(factor >= 1, Config, "latent factor must be at least 1");
        Ok(LatentCodec { factor })
    }

    /// `H×W×3` image in `[0, 1]` to `(H/f · W/f) × 3` latent cells.
    pub fn encode(&self, image: &Tensor) -> Result<Vec<f64>> {
        let s = image.shape();
        ensure!(s.len() == 3 && s[2] == 3, Shape, "expected an H×W×3 image, got {:?}", s);
        let f = self.factor;
        let (h, w) = (s[0], s[1]);
        ensure!(h % f == 0 && w % f == 0, Shape, "{h}×{w} image does not divide by latent factor {f}");
        let (lh, lw) = (h / f, w / f);
        let px = image.data();
        let norm = 1.0 / (f * f) as f64;
        let mut out = vec![0.0; lh * lw * 3];
        for y in 0..lh {
            for x in 0..lw {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += 2.0 * px[((y * f + dy) * w + x * f + dx) * 3 + c] - 1.0;
                        }
                    }
                    out[(y * lw + x) * 3 + c] = acc * norm;
                }
            }
        }
        Ok(out)
    }

    /// Latent cells on an `lh × lw` grid back to an image in `[0, 1]`.
    pub fn decode(&self, latent: &[f64], lh: usize, lw: usize) -> Result<Tensor> {
        ensure!(latent.len() == lh * lw * 3, Shape, "latent has {} values for a {lh}×{lw}×3 grid", latent.len());
        let f = self.factor;
        let (h, w) = (lh * f, lw * f);
        let mut out = Vec::with_capacity(h * w * 3);
        for y in 0..h {
            for x in 0..w {
                let cell = ((y / f) * lw + x / f) * 3;
                out.extend(latent[cell..cell + 3].iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)));
            }
        }
        Tensor::new(vec![h, w, 3], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_image_round_trips() {
        let codec = LatentCodec::new(2).unwrap();
        let img = Tensor::full(vec![4, 6, 3], 0.25);
        let z = codec.encode(&img).unwrap();
        assert_eq!(z.len(), 2 * 3 * 3);
        assert!(z.iter().all(|&v| v == -0.5));
        assert_eq!(codec.decode(&z, 2, 3).unwrap(), img);
    }

    #[test]
    fn decode_clamps() {
        let codec = LatentCodec::new(1).unwrap();
        let t = codec.decode(&[3.0, -3.0, 0.0], 1, 1).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.5]);
    }
}
