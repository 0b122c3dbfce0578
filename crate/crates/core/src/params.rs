//! Named parameter storage.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Which part of the model a parameter belongs to. `Encoder` stands in for
/// the frozen pre-trained text and image encoders, `Base` for the pre-trained
/// text-to-image denoiser, `Adapter` for the personalization layers trained
/// on top of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Base,
    Adapter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    groups: Vec<ParamGroup>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, mut tensor: Tensor, group: ParamGroup) -> Result<ParamId> {
        ensure!(!self.index.contains_key(name), Contract, "duplicate parameter name {name:?}");
        tensor.set_requires_grad(true);
        let id = self.names.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.groups.push(group);
        self.trainable.push(true);
        Ok(ParamId(id))
    }

    /// Gaussian weight with std `1/sqrt(fan_in)`.
    pub fn insert_weight(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Result<ParamId> {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.insert(name, Tensor::randn(vec![fan_in, fan_out], std, rng), group)
    }

    pub fn insert_zeros(&mut self, name: &str, shape: Vec<usize>, group: ParamGroup) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape), group)
    }

    pub fn insert_ones(&mut self, name: &str, shape: Vec<usize>, group: ParamGroup) -> Result<ParamId> {
        self.insert(name, Tensor::full(shape, 1.0), group)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index.get(name).map(|&i| ParamId(i)).ok_or_else(|| Error::Contract(format!("unknown parameter {name:?}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.id(name)?.0])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let id = self.id(name)?;
        Ok(&mut self.tensors[id.0])
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.groups[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Freeze or unfreeze every parameter of a group.
    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for (g, t) in self.groups.iter().zip(self.trainable.iter_mut()) {
            if *g == group {
                *t = trainable;
            }
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        self.trainable.iter_mut().for_each(|t| *t = trainable);
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.names.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn num_trainable_elements(&self) -> usize {
        self.tensors.iter().zip(&self.trainable).filter(|(_, t)| **t).map(|(p, _)| p.numel()).sum()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Reset every trainable gradient to zeros.
    pub fn zero_grads(&mut self) {
        for (t, trainable) in self.tensors.iter_mut().zip(&self.trainable) {
            if *trainable {
                t.zero_grad();
            } else {
                t.clear_grad();
            }
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &[f64]) -> Result<()> {
        self.tensors[id.0].accumulate_grad(grad)
    }

    /// Replace a parameter's values, keeping its group and grad state.
    pub fn set_values(&mut self, id: ParamId, values: Vec<f64>) -> Result<()> {
        let t = &mut self.tensors[id.0];
        ensure!(values.len() == t.numel(), Shape, "parameter {} expects {} values", self.names[id.0], t.numel());
        t.data_mut().copy_from_slice(&values);
        Ok(())
    }

    /// Bitwise equality of every parameter value.
    pub fn values_equal(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}
