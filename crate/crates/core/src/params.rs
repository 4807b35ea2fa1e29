//! Named parameter storage and layouts.

use std::collections::BTreeMap;

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
    TruncNormal(f64),
    /// Uniform on `[-bound, bound)`.
    Uniform(f64),
}

/// One entry of a model layout: enough to count or allocate a parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub trainable: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            init,
            trainable: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn materialize<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        let t = match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::Normal(std) => Tensor::randn(&self.shape, std, rng),
            Init::TruncNormal(std) => Tensor::trunc_normal(&self.shape, std, rng),
            Init::Uniform(bound) => Tensor::uniform(&self.shape, -bound, bound, rng),
        };
        t.with_requires_grad(self.trainable)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

pub fn count_layout(layout: &[ParamSpec]) -> ParamCount {
    ParamCount {
        trainable: layout.iter().filter(|p| p.trainable).map(ParamSpec::numel).sum(),
        total: layout.iter().map(ParamSpec::numel).sum(),
    }
}

/// Parameters keyed by name, iterated in lexicographic order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Allocates every entry of `layout`, drawing initial values in layout order.
    pub fn from_layout<R: Rng + ?Sized>(layout: &[ParamSpec], rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        for spec in layout {
            store.insert(spec.name.clone(), spec.materialize(rng));
        }
        store
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.map.insert(name.into(), t)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.map.remove(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    /// Stored key and tensor for `name`.
    pub fn entry(&self, name: &str) -> Result<(&str, &Tensor)> {
        self.map
            .get_key_value(name)
            .map(|(k, v)| (k.as_str(), v))
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.map.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.map
            .iter()
            .filter(|(_, t)| t.requires_grad())
            .map(|(k, _)| k.clone())
            .collect()
    }

    pub fn count(&self) -> ParamCount {
        ParamCount {
            trainable: self.map.values().filter(|t| t.requires_grad()).map(Tensor::numel).sum(),
            total: self.map.values().map(Tensor::numel).sum(),
        }
    }

    /// Sum of element counts over names starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        self.map.values_mut().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over name, shape and value bits of every entry selected by `keep`.
    pub fn digest(&self, keep: impl Fn(&str, &Tensor) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in &self.map {
            if !keep(name, t) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([0u8]);
            for d in t.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Digest of every tensor that does not track gradients.
    pub fn frozen_digest(&self) -> String {
        self.digest(|_, t| !t.requires_grad())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_counts_match_materialized_store() {
        let mut layout = vec![
            ParamSpec::new("a", &[3, 4], Init::TruncNormal(0.02)),
            ParamSpec::new("b", &[4], Init::Zeros),
        ];
        layout[1].trainable = true;
        let store = ParamStore::from_layout(&layout, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(store.count(), count_layout(&layout));
        assert_eq!(store.count().trainable, 4);
        assert_eq!(store.trainable_names(), vec!["b".to_string()]);
    }

    #[test]
    fn digest_changes_with_values() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::zeros(&[2]));
        let d0 = s.frozen_digest();
        s.get_mut("w").unwrap().data_mut()[1] = 1e-300;
        assert_ne!(d0, s.frozen_digest());
    }
}
