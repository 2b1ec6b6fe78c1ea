use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::{Real, Tensor};

static NEXT_SET_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_SET_ID.fetch_add(1, Ordering::Relaxed)
}

/// Named, ordered collection of trainable tensors.
///
/// Each set carries a process-unique identity used to route gradients back
/// from a [`crate::Graph`]. Cloning a set (for a target network) yields a
/// new identity.
#[derive(Debug)]
pub struct ParamSet<T> {
    id: u64,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> Clone for ParamSet<T> {
    fn clone(&self) -> Self {
        Self { id: fresh_id(), names: self.names.clone(), tensors: self.tensors.clone() }
    }
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { id: fresh_id(), names: Vec::new(), tensors: Vec::new() }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(value);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, index: usize) -> &Tensor<T> {
        &self.tensors[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.tensors[index]
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    /// Total number of scalars across all tensors.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// `self ← tau·source + (1−tau)·self`, elementwise.
    pub fn soft_update_from(&mut self, source: &ParamSet<T>, tau: T) -> crate::Result<()> {
        if self.tensors.len() != source.tensors.len() {
            return Err(crate::AutogradError::Shape {
                expected: vec![self.tensors.len()],
                got: vec![source.tensors.len()],
            });
        }
        for (t, s) in self.tensors.iter().zip(&source.tensors) {
            if t.shape() != s.shape() {
                return Err(crate::AutogradError::Shape { expected: t.shape().to_vec(), got: s.shape().to_vec() });
            }
        }
        let keep = T::one() - tau;
        for (t, s) in self.tensors.iter_mut().zip(&source.tensors) {
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = tau * b + keep * *a;
            }
        }
        Ok(())
    }

    /// Same names and values in another precision (fresh identity).
    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { id: fresh_id(), names: self.names.clone(), tensors: self.tensors.iter().map(Tensor::cast).collect() }
    }
}

/// Parameter gradients produced by [`crate::Graph::backward`].
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    pub(crate) by_param: BTreeMap<(u64, usize), Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, set: &ParamSet<T>, index: usize) -> Option<&Tensor<T>> {
        self.by_param.get(&(set.id(), index))
    }

    /// Gradients for every tensor of `set`, zero where nothing flowed.
    pub fn for_set(&self, set: &ParamSet<T>) -> Vec<Tensor<T>> {
        (0..set.len()).map(|i| self.get(set, i).cloned().unwrap_or_else(|| Tensor::zeros(set.get(i).shape()))).collect()
    }

    /// Whether any gradient reached `set`, including exact zeros.
    pub fn touches(&self, set: &ParamSet<T>) -> bool {
        (0..set.len()).any(|i| self.get(set, i).is_some())
    }

    /// Largest absolute gradient entry over `set` (0 when untouched).
    pub fn max_abs(&self, set: &ParamSet<T>) -> T {
        (0..set.len()).filter_map(|i| self.get(set, i)).fold(T::zero(), |m, t| m.max(t.max_abs()))
    }

    pub fn merge(&mut self, other: Gradients<T>) {
        for (k, v) in other.by_param {
            match self.by_param.get_mut(&k) {
                Some(t) => t.add_assign(&v),
                None => {
                    self.by_param.insert(k, v);
                }
            }
        }
    }
}
