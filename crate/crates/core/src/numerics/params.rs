use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use super::Tensor;
use crate::{Error, Result};

/// Handle to one entry of a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    name: String,
    value: Tensor,
    grad: Tensor,
}

/// Ordered, uniquely named parameters with a gradient slot each.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Entry>,
    index: BTreeMap<String, usize>,
    grads_populated: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::invalid(alloc::format!("duplicate parameter `{name}`")));
        }
        let id = self.entries.len();
        let grad = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            grad,
        });
        self.index.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].grad
    }

    pub fn grads_populated(&self) -> bool {
        self.grads_populated
    }

    /// Add `grads` into the gradient slots.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.grads.len() != self.entries.len() {
            return Err(Error::invalid("gradient set does not match parameter store"));
        }
        for (entry, g) in self.entries.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                if g.shape() != entry.grad.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "accumulate",
                        lhs: entry.grad.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
                entry.grad.add_assign(g);
            }
        }
        self.grads_populated = true;
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.fill(0.0);
        }
        self.grads_populated = false;
    }

    pub(crate) fn entries_mut(&mut self) -> impl Iterator<Item = (&mut Tensor, &Tensor)> {
        self.entries.iter_mut().map(|e| (&mut e.value, &e.grad))
    }

    pub fn max_abs_value(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, e| m.max(e.value.max_abs()))
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// All parameter values, concatenated in store order.
    pub fn flat_values(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|e| e.value.data().iter().copied())
            .collect()
    }

    /// Named values, in store order.
    pub fn named_values(&self) -> Vec<(String, Tensor)> {
        self.entries
            .iter()
            .map(|e| (e.name.clone(), e.value.clone()))
            .collect()
    }

    /// Overwrite values from named tensors; every parameter must be present
    /// with a matching shape. Extra names are ignored.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for e in &mut self.entries {
            let found = named
                .iter()
                .find(|(n, _)| *n == e.name)
                .ok_or_else(|| Error::MissingEntry(e.name.clone()))?;
            if found.1.shape() != e.value.shape() {
                return Err(Error::ShapeMismatch {
                    op: "load",
                    lhs: e.value.shape().to_vec(),
                    rhs: found.1.shape().to_vec(),
                });
            }
            e.value = found.1.clone();
        }
        Ok(())
    }
}

/// Dense per-parameter gradients produced by one backward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub(crate) grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            grads: (0..store.len()).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn add_to(&mut self, id: ParamId, g: Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    /// `self += other`.
    pub fn add(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add_to(ParamId(i), g.clone());
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.scale(factor);
        }
    }

    /// Concatenated gradient in store order; missing entries are zeros.
    pub fn flatten(&self, store: &ParamStore) -> Vec<f64> {
        let mut out = Vec::with_capacity(store.num_scalars());
        for id in store.ids() {
            match self.get(id) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(core::iter::repeat_n(0.0, store.value(id).numel())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(s.insert("w", Tensor::scalar(2.0)).is_err());
        assert_eq!(s.id("w"), Some(ParamId(0)));
    }

    #[test]
    fn load_requires_every_entry() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::scalar(1.0)).unwrap();
        s.insert("b", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let partial = vec![("a".to_string(), Tensor::scalar(3.0))];
        assert_eq!(s.load_named(&partial), Err(Error::MissingEntry("b".into())));
    }
}
