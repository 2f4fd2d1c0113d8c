use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::tape::Gradients;
use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Process-unique identity of a parameter's storage. Two handles with the
/// same id read and write the same values.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F = f32> {
    pub id: ParamId,
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
}

/// Owns parameter storage for one model. Networks hold [`ParamId`]s and
/// read values through the store they were built into.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<F = f32> {
    params: BTreeMap<ParamId, Parameter<F>>,
}

impl<F: Element> ParamStore<F> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) -> ParamId {
        let id = ParamId::fresh();
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            id,
            Parameter {
                id,
                name: name.into(),
                value,
                grad,
            },
        );
        id
    }

    pub fn get(&self, id: ParamId) -> Result<&Parameter<F>> {
        self.params.get(&id).ok_or(Error::UnknownParam(id.0))
    }

    pub fn get_mut(&mut self, id: ParamId) -> Result<&mut Parameter<F>> {
        self.params.get_mut(&id).ok_or(Error::UnknownParam(id.0))
    }

    pub fn value(&self, id: ParamId) -> Result<&Tensor<F>> {
        Ok(&self.get(id)?.value)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.params.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Parameters in creation order.
    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.values()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.values_mut()
    }

    pub fn ids(&self) -> Vec<ParamId> {
        self.params.keys().copied().collect()
    }

    pub fn find(&self, name: &str) -> Option<&Parameter<F>> {
        self.params.values().find(|p| p.name == name)
    }

    pub fn find_mut(&mut self, name: &str) -> Option<&mut Parameter<F>> {
        self.params.values_mut().find(|p| p.name == name)
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad.data_mut().iter_mut().for_each(|g| *g = F::zero());
        }
    }

    /// Adds the gradients of every parameter of this store that was
    /// reached by the backward pass. Returns the ids that were updated.
    pub fn accumulate(&mut self, grads: &Gradients<F>) -> Vec<ParamId> {
        let mut touched = Vec::new();
        for (id, g) in grads.params() {
            if let Some(p) = self.params.get_mut(id) {
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *dst = *dst + *src;
                }
                touched.push(*id);
            }
        }
        touched
    }

    /// Order-sensitive FNV-1a digest over names and raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in self.params.values() {
            eat(p.name.as_bytes());
            for v in p.value.data() {
                eat(&v.as_f64().to_bits().to_le_bytes());
            }
        }
        h
    }
}
