//! Named parameter storage shared by every model component.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

/// Which part of the model a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Encoder,
    Hypernet,
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

pub type Digest32 = [u8; 32];

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, tensor: Tensor) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            tensor,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Replaces a tensor's value; the shape must not change.
    pub fn set(&mut self, id: ParamId, tensor: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0].tensor;
        if slot.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "param_set",
                left: slot.shape().to_vec(),
                right: tensor.shape().to_vec(),
            });
        }
        *slot = tensor;
        Ok(())
    }

    pub fn ids_where(&self, pred: impl Fn(&ParamEntry) -> bool) -> Vec<ParamId> {
        (0..self.entries.len()).filter(|&i| pred(&self.entries[i])).map(ParamId).collect()
    }

    pub fn element_count(&self, pred: impl Fn(&ParamEntry) -> bool) -> usize {
        self.entries.iter().filter(|e| pred(e)).map(|e| e.tensor.len()).sum()
    }

    /// Mutable references to the selected tensors, in id order.
    pub fn tensors_mut(&mut self, ids: &[ParamId]) -> Vec<&mut Tensor> {
        let mut wanted = alloc::vec![false; self.entries.len()];
        for id in ids {
            wanted[id.0] = true;
        }
        self.entries
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| wanted[*i])
            .map(|(_, e)| &mut e.tensor)
            .collect()
    }

    /// SHA-256 over name, shape and little-endian values of the selected entries.
    pub fn digest(&self, pred: impl Fn(&ParamEntry) -> bool) -> Digest32 {
        let mut hasher = Sha256::new();
        for e in self.entries.iter().filter(|e| pred(e)) {
            hasher.update((e.name.len() as u64).to_le_bytes());
            hasher.update(e.name.as_bytes());
            hasher.update((e.tensor.rank() as u64).to_le_bytes());
            for &d in e.tensor.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for x in e.tensor.data() {
                hasher.update(x.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Binds every parameter onto `tape`; those selected by `trainable`
    /// become gradient leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(&ParamEntry) -> bool) -> Bound<'t> {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if trainable(e) {
                    tape.param(e.tensor.clone())
                } else {
                    tape.constant(e.tensor.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    /// Handles supplied by the caller, one per store entry in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn digest_tracks_values_and_names() {
        let mut a = ParamStore::new();
        let id = a.add("w", ParamGroup::Encoder, Tensor::vector(vec![1.0, 2.0]));
        let mut b = a.clone();
        assert_eq!(a.digest(|_| true), b.digest(|_| true));
        b.set(id, Tensor::vector(vec![1.0, 2.5])).unwrap();
        assert_ne!(a.digest(|_| true), b.digest(|_| true));
        let mut c = ParamStore::new();
        c.add("v", ParamGroup::Encoder, Tensor::vector(vec![1.0, 2.0]));
        assert_ne!(a.digest(|_| true), c.digest(|_| true));
        assert!(a.set(id, Tensor::zeros(&[3])).is_err());
    }
}
