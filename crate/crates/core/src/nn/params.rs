use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::tensor::{Element, Tensor};
use crate::error::{Error, Result};

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

fn next_tag() -> u64 {
    NEXT_TAG.fetch_add(1, Ordering::Relaxed)
}

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the owning store, matching [`super::Gradients::for_store`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named parameter arrays of one network.
///
/// The tag identifies the store inside a [`super::Graph`] so gradients can be
/// routed back; it is process-local and never serialized.
#[derive(Debug)]
pub struct ParamStore<E: Element> {
    tag: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<E>>,
    index: BTreeMap<String, usize>,
}

impl<E: Element> Clone for ParamStore<E> {
    fn clone(&self) -> Self {
        Self {
            tag: next_tag(),
            names: self.names.clone(),
            tensors: self.tensors.clone(),
            index: self.index.clone(),
        }
    }
}

impl<E: Element> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamStore<E> {
    pub fn new() -> Self {
        Self { tag: next_tag(), names: Vec::new(), tensors: Vec::new(), index: BTreeMap::new() }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter name {name}");
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(value);
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<E> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    /// Total scalar parameter count.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Same layout and values in another precision.
    pub fn cast<F: Element>(&self) -> ParamStore<F> {
        ParamStore {
            tag: next_tag(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrite values by name. Every local parameter must be present with
    /// a matching shape.
    pub fn load_from(&mut self, named: &BTreeMap<String, Tensor<E>>) -> Result<()> {
        for (i, name) in self.names.iter().enumerate() {
            let src = named
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name}: stored shape {:?}, expected {:?}",
                    src.shape(),
                    self.tensors[i].shape()
                )));
            }
            self.tensors[i] = src.clone();
        }
        if named.len() != self.names.len() {
            let extra: Vec<_> = named.keys().filter(|k| !self.index.contains_key(*k)).collect();
            return Err(Error::Checkpoint(format!("unexpected parameters {extra:?}")));
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and the little-endian f32 image of every
    /// value. Stable across precisions as long as values are f32-exact.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update((v.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

/// Weight initialisers used by the layer constructors.
pub fn kaiming_normal<E: Element, R: Rng>(rng: &mut R, shape: Vec<usize>, fan_in: usize) -> Tensor<E> {
    let std = (1.0 / fan_in.max(1) as f64).sqrt();
    normal(rng, shape, std)
}

pub fn normal<E: Element, R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<E> {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..n).map(|_| E::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hash_is_stable_under_cast_and_clone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::<f32>::new();
        s.add("a", normal(&mut rng, vec![3, 2], 1.0));
        s.add("b", Tensor::zeros(vec![4]));
        let h = s.hash_hex();
        assert_eq!(h, s.cast::<f64>().hash_hex());
        let c = s.clone();
        assert_ne!(c.tag(), s.tag());
        assert_eq!(c.hash_hex(), h);
        assert_eq!(s.count(), 10);
    }

    #[test]
    fn load_rejects_shape_mismatch() {
        let mut s = ParamStore::<f32>::new();
        s.add("w", Tensor::zeros(vec![2, 2]));
        let mut named = BTreeMap::new();
        named.insert("w".to_string(), Tensor::zeros(vec![4]));
        assert!(s.load_from(&named).is_err());
        named.insert("w".to_string(), Tensor::full(vec![2, 2], 1.0));
        s.load_from(&named).unwrap();
        assert_eq!(s.get(ParamId(0)).sum(), 4.0);
    }
}
