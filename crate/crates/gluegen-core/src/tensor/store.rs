//! Trainable leaf tensors and the named store that owns them.
//!
//! A `ParameterStore` maps stable string names to [`Tensor`]s. Iteration
//! order is lexicographic by name so optimizer sweeps, serialization, and
//! gradient dumps are deterministic. Every store instance carries a unique id
//! used by the tape to route gradients back to the right owner.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

use super::array::Array;
use super::element::Element;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Leaf tensor: a value, a trainability flag, and an optional gradient
/// buffer. The gradient is only ever present on trainable tensors and always
/// matches the value's shape.
#[derive(Debug)]
pub struct Tensor<E> {
    value: Array<E>,
    requires_grad: bool,
    grad: Option<Array<E>>,
}

impl<E: Element> Tensor<E> {
    pub fn new(value: Array<E>, requires_grad: bool) -> Self {
        Tensor { value, requires_grad, grad: None }
    }

    pub fn value(&self) -> &Array<E> {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Array<E> {
        &mut self.value
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&Array<E>> {
        self.grad.as_ref()
    }

    /// Drop any accumulated gradient.
    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Add `g` into the gradient buffer, allocating it on first use.
    /// No-op on non-trainable tensors.
    pub(crate) fn accumulate_grad(&mut self, g: &Array<E>) {
        if !self.requires_grad {
            return;
        }
        match &mut self.grad {
            Some(buf) => {
                for (dst, src) in buf.as_mut_slice().iter_mut().zip(g.as_slice()) {
                    *dst += *src;
                }
            }
            None => self.grad = Some(g.clone()),
        }
    }
}

impl<E: Element> Clone for Tensor<E> {
    fn clone(&self) -> Self {
        Tensor {
            value: self.value.clone(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        }
    }
}

/// Named collection of leaf tensors with deterministic iteration order.
#[derive(Debug)]
pub struct ParameterStore<E> {
    id: u64,
    entries: BTreeMap<String, Tensor<E>>,
}

impl<E: Element> ParameterStore<E> {
    pub fn new() -> Self {
        ParameterStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            entries: BTreeMap::new(),
        }
    }

    /// Unique id of this store instance.
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Register a tensor under a fresh name.
    pub fn insert(&mut self, name: &str, tensor: Tensor<E>) -> Result<()> {
        if name.is_empty() {
            return Err(Error::Config("empty parameter name".into()));
        }
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam { name: name.to_string() });
        }
        self.entries.insert(name.to_string(), tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam { name: name.to_string() })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<E>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam { name: name.to_string() })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Tensors in lexicographic name order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Mutable iteration in lexicographic name order.
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<E>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar elements across all tensors.
    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|t| t.value().numel()).sum()
    }

    /// Clear the gradients of every tensor.
    pub fn clear_grads(&mut self) {
        for t in self.entries.values_mut() {
            t.clear_grad();
        }
    }

    /// Convert every tensor to another precision (gradients are dropped).
    pub fn cast<F: Element>(&self) -> ParameterStore<F> {
        let mut out = ParameterStore::new();
        for (name, t) in self.iter() {
            out.entries
                .insert(name.to_string(), Tensor::new(t.value().cast(), t.requires_grad()));
        }
        out
    }
}

impl<E: Element> Default for ParameterStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Clone for ParameterStore<E> {
    /// Cloning yields a store with the same contents but a fresh id, so a
    /// clone is never mistaken for the original during gradient routing.
    fn clone(&self) -> Self {
        ParameterStore {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
        }
    }
}
