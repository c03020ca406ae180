use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tape::StatUpdate;
use crate::tensor::Tensor;

static NEXT_TAG: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Param<T> {
    name: String,
    value: Arc<Tensor<T>>,
    trainable: bool,
}

/// One named, serialized group of tensors (a whole network's weights and buffers).
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor<T>,
}

/// Owns the parameters and buffers of one network.
///
/// Every store carries a process-unique tag so a tape can tell stores apart;
/// cloning yields a store with a fresh tag.
#[derive(Debug)]
pub struct ParamStore<T> {
    tag: u64,
    name: String,
    params: Vec<Param<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        Self { tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed), name: self.name.clone(), params: self.params.clone() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(name: impl Into<String>) -> Self {
        Self { tag: NEXT_TAG.fetch_add(1, Ordering::Relaxed), name: name.into(), params: Vec::new() }
    }

    pub fn tag(&self) -> u64 {
        self.tag
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, trainable: bool) -> ParamId {
        self.params.push(Param { name: name.into(), value: Arc::new(value), trainable });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn name_of(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.params[id.0].value.clone()
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    /// Folds batch-norm statistics recorded on a tape into the running buffers.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate<T>]) {
        let tag = self.tag;
        for u in updates.iter().filter(|u| u.store == tag) {
            let m = T::from_f64_lossy(u.momentum);
            let keep = T::one() - m;
            let mean = self.get_mut(u.mean);
            mean.data_mut().iter_mut().zip(&u.batch_mean).for_each(|(r, &b)| *r = *r * keep + b * m);
            let var = self.get_mut(u.var);
            var.data_mut().iter_mut().zip(&u.batch_var).for_each(|(r, &b)| *r = *r * keep + b * m);
        }
    }

    /// `p += alpha * dir` for every trainable parameter, `dir` in id order.
    pub fn axpy(&mut self, alpha: f64, dir: &[Tensor<T>]) {
        let a = T::from_f64_lossy(alpha);
        let ids: Vec<_> = self.ids().filter(|&id| self.is_trainable(id)).collect();
        assert_eq!(ids.len(), dir.len(), "axpy direction count");
        for (id, d) in ids.into_iter().zip(dir) {
            let p = self.get_mut(id);
            p.data_mut().iter_mut().zip(d.data()).for_each(|(x, &y)| *x = *x + a * y);
        }
    }

    /// Hash of the exact bit patterns of every tensor.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in &self.params {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for x in p.value.data() {
                x.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn export(&self) -> Vec<NamedTensor<T>> {
        self.params
            .iter()
            .map(|p| NamedTensor { name: p.name.clone(), trainable: p.trainable, value: (*p.value).clone() })
            .collect()
    }

    /// Replaces all values; names and shapes must match this store's layout.
    pub fn import(&mut self, tensors: &[NamedTensor<T>]) -> Result<()> {
        if tensors.len() != self.params.len() {
            return Err(TensorError::Invalid(format!(
                "store '{}' expects {} tensors, got {}",
                self.name,
                self.params.len(),
                tensors.len()
            )));
        }
        for (p, t) in self.params.iter().zip(tensors) {
            if p.name != t.name || p.value.shape() != t.value.shape() {
                return Err(TensorError::Invalid(format!(
                    "store '{}': expected {} {:?}, got {} {:?}",
                    self.name,
                    p.name,
                    p.value.shape(),
                    t.name,
                    t.value.shape()
                )));
            }
        }
        for (p, t) in self.params.iter_mut().zip(tensors) {
            p.value = Arc::new(t.value.clone());
        }
        Ok(())
    }
}
