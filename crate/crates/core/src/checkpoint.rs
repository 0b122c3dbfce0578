//! Checkpoint files: an 8-byte little-endian header length, a JSON header,
//! then every parameter as little-endian f64 in store order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{read_file, write_file};
use crate::embedding::Vocab;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::rng::RngState;
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub config: RunConfig,
    pub step: u64,
    pub rng: Option<RngState>,
    pub vocab: Vec<String>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

/// Entries for `store` with offsets in store order.
pub fn tensor_entries(store: &ParamStore) -> BTreeMap<String, TensorEntry> {
    let mut offset = 0u64;
    let mut out = BTreeMap::new();
    for (name, t) in store.iter() {
        out.insert(name.to_string(), TensorEntry { shape: t.shape().to_vec(), byte_offset: offset });
        offset += 8 * t.numel() as u64;
    }
    out
}

pub fn encode(store: &ParamStore, config: &RunConfig, vocab: &Vocab, rng: Option<RngState>) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_FORMAT_VERSION,
        config: config.clone(),
        step: store.step(),
        rng,
        vocab: vocab.tokens().to_vec(),
        tensors: tensor_entries(store),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Internal(e.to_string()))?;
    let mut out = Vec::with_capacity(8 + json.len() + 8 * store.num_elements());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in store.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Header plus named tensors.
pub fn decode(bytes: &[u8], context: &str) -> Result<(CheckpointHeader, BTreeMap<String, Tensor>)> {
    let truncated = || Error::parse(context, "checkpoint is truncated");
    let len_bytes: [u8; 8] = bytes.get(..8).ok_or_else(truncated)?.try_into().expect("8 bytes");
    let len = u64::from_le_bytes(len_bytes) as usize;
    let json = bytes.get(8..8usize.checked_add(len).ok_or_else(truncated)?).ok_or_else(truncated)?;
    let value: serde_json::Value = serde_json::from_slice(json).map_err(|e| Error::parse(context, e.to_string()))?;
    let found = value.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| Error::parse(context, "missing format_version"))?;
    if found != CHECKPOINT_FORMAT_VERSION as u64 {
        return Err(Error::Version { expected: CHECKPOINT_FORMAT_VERSION, found: found as u32 });
    }
    let header: CheckpointHeader = serde_json::from_value(value).map_err(|e| Error::parse(context, e.to_string()))?;
    let blob = &bytes[8 + len..];
    let mut tensors = BTreeMap::new();
    let mut expected_len = 0usize;
    for (name, entry) in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let start = entry.byte_offset as usize;
        let raw = blob.get(start..start + 8 * n).ok_or_else(truncated)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        tensors.insert(name.clone(), Tensor::new(entry.shape.clone(), data)?);
        expected_len += 8 * n;
    }
    if blob.len() != expected_len {
        return Err(Error::parse(context, format!("blob has {} bytes, header describes {expected_len}", blob.len())));
    }
    Ok((header, tensors))
}

/// Overwrite every parameter of `store` by name; names and shapes must
/// match exactly.
pub fn restore_params(store: &mut ParamStore, tensors: &BTreeMap<String, Tensor>, context: &str) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::parse(context, format!("checkpoint has {} tensors, model has {}", tensors.len(), store.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let name = store.name(id).to_string();
        let t = tensors.get(&name).ok_or_else(|| Error::parse(context, format!("missing tensor {name:?}")))?;
        if t.shape() != store.tensor(id).shape() {
            return Err(Error::parse(
                context,
                format!("tensor {name:?} has shape {:?}, model expects {:?}", t.shape(), store.tensor(id).shape()),
            ));
        }
        store.set_values(id, t.data().to_vec())?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct LoadedCheckpoint {
    pub model: Model,
    pub config: RunConfig,
    pub step: u64,
    pub rng: Option<RngState>,
}

pub fn save(path: &Path, model: &Model, config: &RunConfig, rng: Option<RngState>) -> Result<()> {
    write_file(path, &encode(&model.params, config, &model.vocab, rng)?)
}

pub fn from_bytes(bytes: &[u8], context: &str) -> Result<LoadedCheckpoint> {
    let (header, tensors) = decode(bytes, context)?;
    header.config.validate()?;
    let vocab = Vocab::from_tokens(header.vocab)?;
    let mut model = Model::init(header.config.model.clone(), vocab, 0)?;
    restore_params(&mut model.params, &tensors, context)?;
    model.params.set_step(header.step);
    Ok(LoadedCheckpoint { model, config: header.config, step: header.step, rng: header.rng })
}

pub fn load(path: &Path) -> Result<LoadedCheckpoint> {
    from_bytes(&read_file(path)?, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamGroup;

    #[test]
    fn offsets_are_cumulative() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(vec![2, 3]), ParamGroup::Base).unwrap();
        s.insert("b", Tensor::zeros(vec![1]), ParamGroup::Base).unwrap();
        s.insert("c", Tensor::zeros(vec![4, 1]), ParamGroup::Adapter).unwrap();
        let e = tensor_entries(&s);
        assert_eq!(e["a"].byte_offset, 0);
        assert_eq!(e["b"].byte_offset, 48);
        assert_eq!(e["c"].byte_offset, 56);
    }

    #[test]
    fn version_and_truncation_errors() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::full(vec![2], 1.5), ParamGroup::Base).unwrap();
        let bytes = encode(&s, &RunConfig::default(), &Vocab::toy(), None).unwrap();
        let (_, t) = decode(&bytes, "x").unwrap();
        assert_eq!(t["a"].data(), &[1.5, 1.5]);
        assert!(decode(&bytes[..bytes.len() - 3], "x").is_err());
        assert!(decode(&bytes[..5], "x").is_err());

        let len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
        let json = String::from_utf8(bytes[8..8 + len].to_vec()).unwrap().replace("\"format_version\":1", "\"format_version\":7");
        let mut patched = (json.len() as u64).to_le_bytes().to_vec();
        patched.extend_from_slice(json.as_bytes());
        patched.extend_from_slice(&bytes[8 + len..]);
        match decode(&patched, "x") {
            Err(Error::Version { expected: 1, found: 7 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }
}
