//! Named trainable tensors.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Identifies one tensor inside one [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId {
    pub store: u32,
    pub index: u32,
}

pub const DETECTOR_STORE: u32 = 0;
pub const DENOISER_STORE: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tag: u32,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(tag: u32) -> Self {
        ParamStore { tag, names: Vec::new(), tensors: Vec::new() }
    }

    pub fn tag(&self) -> u32 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        let index = self.tensors.len() as u32;
        self.names.push(name.into());
        self.tensors.push(value);
        ParamId { store: self.tag, index }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        debug_assert_eq!(id.store, self.tag, "parameter from another store");
        &self.tensors[id.index as usize]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        debug_assert_eq!(id.store, self.tag, "parameter from another store");
        &mut self.tensors[id.index as usize]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.index as usize]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.tensors.len() as u32).map(move |index| ParamId { store: self.tag, index })
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.ids()
            .zip(self.names.iter())
            .zip(self.tensors.iter())
            .map(|((id, n), t)| (id, n.as_str(), t))
    }

    /// Total element count of all tensors.
    pub fn num_elements(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, name, t) in self.iter() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        format!("{:x}", h.finalize())
    }

    /// Replaces all values with those of `other`, which must have identical layout.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::config("parameter layout differs"));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::config("parameter shape differs"));
            }
            *a = b.clone();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tag: self.tag,
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// Element count of a set of stores.
pub fn count_parameters<T: Scalar>(stores: &[&ParamStore<T>]) -> usize {
    stores.iter().map(|s| s.num_elements()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn count_is_value_independent() {
        let mut s = ParamStore::<f64>::new(0);
        let w = s.add("w", Tensor::zeros(&[8, 8, 1, 1]));
        s.add("b", Tensor::zeros(&[8]));
        assert_eq!(s.num_elements(), 72);
        s.get_mut(w).fill(3.0);
        assert_eq!(count_parameters(&[&s]), 72);
        assert_eq!(count_parameters::<f64>(&[]), 0);
    }

    #[test]
    fn hash_tracks_values() {
        let mut s = ParamStore::<f32>::new(0);
        let w = s.add("w", Tensor::zeros(&[3]));
        let h0 = s.content_hash();
        s.get_mut(w)[1] = 1e-7;
        assert_ne!(h0, s.content_hash());
    }
}
