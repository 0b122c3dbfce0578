//! PPM/PGM images and the on-disk dataset layout.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::embedding::{TokenId, Vocab};
use crate::error::{ensure, Error, Result};
use crate::geometry::BoxNorm;
use crate::tensor::Tensor;

use super::sample::{SubjectSlot, TrainingSample};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM bytes of an `H×W×3` image in `[0, 1]`.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    ensure!(s.len() == 3 && s[2] == 3, Shape, "PPM needs an H×W×3 image, got {:?}", s);
    let mut out = format!("P6\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(image.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

/// Binary PGM bytes of an `H×W` map in `[0, 1]`.
pub fn encode_pgm(map: &Tensor) -> Result<Vec<u8>> {
    let s = map.shape();
    ensure!(s.len() == 2, Shape, "PGM needs an H×W map, got {:?}", s);
    let mut out = format!("P5\n{} {}\n255\n", s[1], s[0]).into_bytes();
    out.extend(map.data().iter().map(|&v| to_u8(v)));
    Ok(out)
}

fn header_fields(bytes: &[u8], count: usize, context: &str) -> Result<(Vec<usize>, usize)> {
    let mut fields = Vec::with_capacity(count);
    let mut i = 0;
    while fields.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && bytes[i].is_ascii_digit() {
            i += 1;
        }
        ensure_parse(start < i, context, "truncated header")?;
        let text = std::str::from_utf8(&bytes[start..i]).expect("ascii digits");
        fields.push(text.parse().map_err(|_| Error::parse(context, format!("bad header number {text:?}")))?);
    }
    ensure_parse(i < bytes.len(), context, "missing pixel data")?;
    Ok((fields, i + 1))
}

fn ensure_parse(cond: bool, context: &str, message: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::parse(context, message))
    }
}

fn decode_netpbm(bytes: &[u8], magic: &[u8; 2], channels: usize, context: &str) -> Result<Tensor> {
    ensure_parse(bytes.len() >= 2 && &bytes[..2] == magic, context, "wrong magic number")?;
    let (f, start) = header_fields(&bytes[2..], 3, context)?;
    let (w, h, max) = (f[0], f[1], f[2]);
    ensure_parse(max == 255, context, "only 8-bit images are supported")?;
    ensure_parse(w > 0 && h > 0, context, "empty image")?;
    let body = &bytes[2 + start..];
    ensure_parse(body.len() == w * h * channels, context, "pixel data length does not match the header")?;
    let data = body.iter().map(|&b| b as f64 / 255.0).collect();
    let shape = if channels == 3 { vec![h, w, 3] } else { vec![h, w] };
    Tensor::new(shape, data)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    decode_netpbm(bytes, b"P6", 3, "ppm")
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor> {
    decode_netpbm(bytes, b"P5", 1, "pgm")
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    write_file(path, &encode_ppm(image)?)
}

pub fn read_ppm(path: &Path) -> Result<Tensor> {
    decode_netpbm(&read_file(path)?, b"P6", 3, &path.display().to_string())
}

pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    write_file(path, &encode_pgm(map)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectRecord {
    /// Path relative to the dataset directory; absent for pads.
    pub crop: Option<String>,
    pub entity: TokenId,
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    pub is_pad: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub target: String,
    pub caption: String,
    pub token_ids: Vec<TokenId>,
    pub subjects: Vec<SubjectRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub count: usize,
    pub samples: Vec<SampleRecord>,
}

/// Write images and `manifest.json` under `dir`, creating it if needed.
pub fn write_dataset(samples: &[TrainingSample], dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let target = format!("targets/{i:06}.ppm");
        write_ppm(&dir.join(&target), &s.target)?;
        let mut subjects = Vec::with_capacity(s.subjects.len());
        for (k, slot) in s.subjects.iter().enumerate() {
            let crop = if slot.is_pad {
                None
            } else {
                let rel = format!("crops/{i:06}_{k}.ppm");
                write_ppm(&dir.join(&rel), &slot.crop)?;
                Some(rel)
            };
            subjects.push(SubjectRecord { crop, entity: slot.entity, bbox: slot.bbox.coords(), is_pad: slot.is_pad });
        }
        records.push(SampleRecord { target, caption: s.caption.clone(), token_ids: s.caption_ids.clone(), subjects });
    }
    let manifest = Manifest { format_version: DATASET_FORMAT_VERSION, count: records.len(), samples: records };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Internal(e.to_string()))?;
    write_file(&dir.join(MANIFEST), json.as_bytes())?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version { expected: DATASET_FORMAT_VERSION, found: manifest.format_version });
    }
    ensure_parse(
        manifest.count == manifest.samples.len(),
        &path.display().to_string(),
        "field `count` disagrees with the number of samples",
    )?;
    Ok(manifest)
}

/// Load a dataset written by [`write_dataset`]. Pad crops are rebuilt as
/// zeros sized like the sample's real crops.
pub fn read_dataset(dir: &Path, vocab: &Vocab) -> Result<Vec<TrainingSample>> {
    let manifest = read_manifest(dir)?;
    let context = dir.join(MANIFEST).display().to_string();
    manifest
        .samples
        .iter()
        .enumerate()
        .map(|(i, rec)| {
            vocab.check(&rec.token_ids)?;
            let target = read_ppm(&dir.join(&rec.target))?;
            let mut subjects: Vec<SubjectSlot> = Vec::with_capacity(rec.subjects.len());
            let mut crop_size = None;
            for (k, sr) in rec.subjects.iter().enumerate() {
                let bbox = BoxNorm::try_from(sr.bbox)
                    .map_err(|e| Error::parse(&context, format!("samples[{i}].subjects[{k}].box: {e}")))?;
                vocab.check(&[sr.entity])?;
                let crop = match (&sr.crop, sr.is_pad) {
                    (Some(p), false) => {
                        let c = read_ppm(&dir.join(p))?;
                        crop_size = Some(c.shape()[0]);
                        c
                    }
                    (None, true) => Tensor::zeros(vec![0]),
                    _ => return Err(Error::parse(&context, format!("samples[{i}].subjects[{k}]: crop must be present exactly when is_pad is false"))),
                };
                subjects.push(SubjectSlot { crop, entity: sr.entity, bbox, is_pad: sr.is_pad });
            }
            let size = crop_size.ok_or_else(|| Error::parse(&context, format!("samples[{i}] has no real subject")))?;
            for s in subjects.iter_mut().filter(|s| s.is_pad) {
                s.crop = Tensor::zeros(vec![size, size, 3]);
            }
            Ok(TrainingSample { target, caption: rec.caption.clone(), caption_ids: rec.token_ids.clone(), subjects })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_on_quantized_values() {
        let data: Vec<f64> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as f64 / 255.0).collect();
        let img = Tensor::new(vec![2, 3, 3], data).unwrap();
        assert_eq!(decode_ppm(&encode_ppm(&img).unwrap()).unwrap(), img);
    }

    #[test]
    fn pgm_header() {
        let map = Tensor::new(vec![1, 2], vec![0.0, 1.0]).unwrap();
        assert_eq!(encode_pgm(&map).unwrap(), b"P5\n2 1\n255\n\x00\xff".to_vec());
        assert_eq!(decode_pgm(&encode_pgm(&map).unwrap()).unwrap(), map);
    }

    #[test]
    fn truncated_ppm_is_an_error() {
        let img = Tensor::zeros(vec![2, 2, 3]);
        let bytes = encode_ppm(&img).unwrap();
        assert!(decode_ppm(&bytes[..bytes.len() - 1]).is_err());
        assert!(decode_ppm(b"P6\n2").is_err());
    }

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&[], dir.path()).unwrap();
        assert_eq!(m.count, 0);
        assert!(read_dataset(dir.path(), &Vocab::toy()).unwrap().is_empty());
    }
}
