use std::sync::atomic::{AtomicU64, Ordering};

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{Float, Tensor};
use crate::error::{Error, Result};

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named parameter collection. Each store carries a process-unique id so a
/// graph can route gradients back to the store that owns a parameter.
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    params: Vec<Param>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        // A clone is a distinct owner; gradients recorded against the
        // original must not land in the copy.
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub(crate) fn store_id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let grad = Tensor::zeros(value.shape());
        self.params.push(Param {
            name: name.into(),
            value,
            grad,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// All parameter values concatenated in registration order.
    pub fn flatten(&self) -> Vec<Float> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for p in &self.params {
            out.extend_from_slice(p.value.data());
        }
        out
    }

    /// Replace values from name/tensor pairs; every stored name must be present.
    pub fn load_values(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = values
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::Format(format!("missing parameter `{}`", p.name)))?;
            if t.shape() != p.value.shape() {
                return Err(Error::dim("load_values", p.value.shape(), t.shape()));
            }
            p.value = t.clone();
        }
        Ok(())
    }

    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.clone()))
            .collect()
    }
}

/// Deterministic RNG stream for one named quantity under a run seed. Adding
/// or reordering other parameters never perturbs this stream.
pub fn named_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    let digest = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_shape_follows_value() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(&[3, 2]), true);
        assert_eq!(s.get(id).grad.shape(), &[3, 2]);
        assert_eq!(s.find("w"), Some(id));
    }

    #[test]
    fn named_rng_is_stable_per_name() {
        use rand::Rng;
        let a: u64 = named_rng(7, "x").random();
        let b: u64 = named_rng(7, "x").random();
        let c: u64 = named_rng(7, "y").random();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
