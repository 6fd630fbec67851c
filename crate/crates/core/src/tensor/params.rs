use std::collections::HashMap;

use rand::Rng;

use super::Tensor;
use crate::error::{Error, Result};

/// A named trainable value with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLeaf {
    pub id: String,
    pub value: Tensor,
    pub grad: Option<Tensor>,
}

/// Ordered collection of trainable leaves plus non-trainable buffers
/// (batch-norm running statistics). Insertion order is the manifest order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<ParamLeaf>,
    buffers: Vec<(String, Tensor)>,
    param_index: HashMap<String, usize>,
    buffer_index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn check_new(&self, id: &str) -> Result<()> {
        if self.param_index.contains_key(id) || self.buffer_index.contains_key(id) {
            return Err(Error::Contract(format!("duplicate leaf id `{id}`")));
        }
        Ok(())
    }

    pub fn add_param(&mut self, id: impl Into<String>, value: Tensor) -> Result<()> {
        let id = id.into();
        self.check_new(&id)?;
        self.param_index.insert(id.clone(), self.params.len());
        self.params.push(ParamLeaf {
            id,
            value,
            grad: None,
        });
        Ok(())
    }

    pub fn add_buffer(&mut self, id: impl Into<String>, value: Tensor) -> Result<()> {
        let id = id.into();
        self.check_new(&id)?;
        self.buffer_index.insert(id.clone(), self.buffers.len());
        self.buffers.push((id, value));
        Ok(())
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.param_index.get(id).copied()
    }

    pub fn leaf(&self, idx: usize) -> &ParamLeaf {
        &self.params[idx]
    }

    pub fn leaf_mut(&mut self, idx: usize) -> &mut ParamLeaf {
        &mut self.params[idx]
    }

    pub fn param(&self, id: &str) -> Option<&ParamLeaf> {
        self.index_of(id).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, id: &str) -> Option<&mut ParamLeaf> {
        self.index_of(id).map(|i| &mut self.params[i])
    }

    pub fn buffer(&self, id: &str) -> Option<&Tensor> {
        self.buffer_index.get(id).map(|&i| &self.buffers[i].1)
    }

    pub fn buffer_mut(&mut self, id: &str) -> Option<&mut Tensor> {
        self.buffer_index.get(id).map(|&i| &mut self.buffers[i].1)
    }

    pub fn params(&self) -> &[ParamLeaf] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamLeaf] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.buffers
    }

    /// Number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub(crate) fn accumulate_grad(&mut self, idx: usize, g: &[f64]) -> Result<()> {
        let leaf = &mut self.params[idx];
        if g.len() != leaf.value.numel() {
            return Err(Error::Contract(format!("gradient size mismatch for `{}`", leaf.id)));
        }
        match &mut leaf.grad {
            Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => leaf.grad = Some(Tensor::new(leaf.value.shape().to_vec(), g.to_vec())?),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// True when both stores hold the same ids, kinds and shapes in the same order.
    pub fn same_manifest(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.buffers.len() == other.buffers.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.id == b.id && a.value.shape() == b.value.shape())
            && self
                .buffers
                .iter()
                .zip(&other.buffers)
                .all(|(a, b)| a.0 == b.0 && a.1.shape() == b.1.shape())
    }
}

pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Uniform draw in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = xavier_bound(fan_in, fan_out);
    Tensor::from_fn(shape, |_| rng.gen_range(-a..a))
}
