//! Named parameter storage and per-element trainability masks.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::corpus::hex;
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

/// Parameters of one component, addressed by local name and exposed to the
/// rest of the crate under `prefix.local`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    prefix: String,
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new(prefix: &str) -> Self {
        ParamSet {
            prefix: prefix.to_string(),
            map: BTreeMap::new(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn full_name(&self, local: &str) -> String {
        if self.prefix.is_empty() {
            local.to_string()
        } else {
            format!("{}.{local}", self.prefix)
        }
    }

    pub fn insert(&mut self, local: &str, t: Tensor<T>) {
        self.map.insert(local.to_string(), t);
    }

    pub fn get(&self, local: &str) -> &Tensor<T> {
        self.map
            .get(local)
            .unwrap_or_else(|| panic!("missing parameter {}", self.full_name(local)))
    }

    pub fn get_mut(&mut self, local: &str) -> Option<&mut Tensor<T>> {
        self.map.get_mut(local)
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a, T>, local: &str) -> NodeId {
        g.param(&self.full_name(local), self.get(local))
    }

    /// `(full name, tensor)` in name order.
    pub fn iter(&self) -> impl Iterator<Item = (String, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (self.full_name(k), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (String, &mut Tensor<T>)> {
        let prefix = self.prefix.clone();
        self.map.iter_mut().map(move |(k, v)| {
            let name = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            (name, v)
        })
    }

    /// Looks up by full name.
    pub fn get_full_mut(&mut self, full: &str) -> Option<&mut Tensor<T>> {
        let local = if self.prefix.is_empty() {
            full
        } else {
            full.strip_prefix(&self.prefix)?.strip_prefix('.')?
        };
        self.map.get_mut(local)
    }

    pub fn n_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            prefix: self.prefix.clone(),
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// SHA-256 over names, shapes and values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.iter() {
            hash_tensor(&mut h, &name, t);
        }
        hex(&h.finalize())
    }
}

pub(crate) fn hash_tensor<T: Scalar>(h: &mut Sha256, name: &str, t: &Tensor<T>) {
    h.update(name.as_bytes());
    h.update((t.rows() as u64).to_le_bytes());
    h.update((t.cols() as u64).to_le_bytes());
    for v in t.data() {
        h.update(v.f64().to_bits().to_le_bytes());
    }
}

/// Per-element trainability, keyed by full parameter name.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TrainableMask {
    map: BTreeMap<String, Vec<bool>>,
}

impl TrainableMask {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, name: &str, mask: Vec<bool>) {
        self.map.insert(name.to_string(), mask);
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[bool])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn count_true(&self) -> usize {
        self.map.values().map(|m| m.iter().filter(|&&b| b).count()).sum()
    }

    /// Names with at least one trainable element.
    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, m)| m.iter().any(|&b| b))
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn is_trainable(&self, name: &str, index: usize) -> bool {
        self.map.get(name).is_some_and(|m| m[index])
    }
}

/// Mutable access to named tensors, for optimizers and finite differences.
pub trait ParamAccess<T> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>>;
}

impl<T> ParamAccess<T> for BTreeMap<String, Tensor<T>> {
    fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.get_mut(name)
    }
}
