//! Named parameter collections and gradient accumulators.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tape, Tensor, Var};

pub type ParamId = usize;

/// Ordered, uniquely named set of parameter tensors for one network.
#[derive(Clone, Debug)]
pub struct ParamSet<E> {
    names: Vec<String>,
    values: Vec<Tensor<E>>,
}

impl<E: Element> Default for ParamSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> ParamSet<E> {
    pub fn new() -> Self {
        ParamSet { names: Vec::new(), values: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<E>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.values.iter().map(|t| t.numel()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id]
    }

    pub fn get(&self, id: ParamId) -> &Tensor<E> {
        &self.values[id]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<E>) {
        assert_eq!(value.shape(), self.values[id].shape(), "set() changes shape of {}", self.names[id]);
        self.values[id] = value;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<E>)> {
        self.names.iter().map(|n| n.as_str()).zip(self.values.iter())
    }

    pub fn cast<F: Element>(&self) -> ParamSet<F> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(|t| t.cast()).collect(),
        }
    }

    /// Record every parameter as a leaf on `tape`, in id order. The returned
    /// vars parallel the param ids.
    pub fn bind(&self, tape: &mut Tape<E>) -> Result<Vec<Var>> {
        self.values.iter().map(|t| tape.leaf(t.clone())).collect()
    }
}

/// Per-parameter gradient accumulator parallel to one [`ParamSet`].
/// Entries stay `None` until something is accumulated into them.
#[derive(Clone, Debug)]
pub struct GradStore<E> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Element> GradStore<E> {
    pub fn new(len: usize) -> Self {
        GradStore { grads: vec![None; len] }
    }

    pub fn for_params(params: &ParamSet<E>) -> Self {
        Self::new(params.len())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn get(&self, id: ParamId) -> Option<&[E]> {
        self.grads[id].as_deref()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[E], scale: E) {
        let slot = self.grads[id].get_or_insert_with(|| vec![E::zero(); grad.len()]);
        assert_eq!(slot.len(), grad.len(), "gradient length changed for param {id}");
        for (s, &g) in slot.iter_mut().zip(grad) {
            *s += scale * g;
        }
    }

    /// Pull gradients off a tape for every bound parameter, scaled.
    pub fn accumulate_from_tape(&mut self, tape: &Tape<E>, binding: &[Var], scale: E) {
        assert_eq!(binding.len(), self.grads.len(), "binding does not match store");
        for (id, &var) in binding.iter().enumerate() {
            if let Some(g) = tape.grad(var) {
                self.accumulate(id, g, scale);
            }
        }
    }

    pub fn accumulate_store(&mut self, other: &GradStore<E>, scale: E) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (id, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g, scale);
            }
        }
    }

    pub fn clear(&mut self) {
        for g in &mut self.grads {
            *g = None;
        }
    }

    pub fn cast<F: Element>(&self) -> GradStore<F> {
        GradStore {
            grads: self
                .grads
                .iter()
                .map(|g| g.as_ref().map(|v| v.iter().map(|&x| F::from_f64(x.to_f64())).collect()))
                .collect(),
        }
    }

    /// Largest absolute entry across all gradients (0 if empty).
    pub fn max_abs(&self) -> E {
        let mut m = E::zero();
        for g in self.grads.iter().flatten() {
            for &v in g {
                if v.abs() > m {
                    m = v.abs();
                }
            }
        }
        m
    }
}

/// Validate that a checkpoint-style flat list matches a live ParamSet layout.
pub fn check_same_layout<E: Element>(a: &ParamSet<E>, b: &ParamSet<E>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Checkpoint(format!(
            "parameter count mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    for id in 0..a.len() {
        if a.name(id) != b.name(id) || a.get(id).shape() != b.get(id).shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {} mismatch: {} {:?} vs {} {:?}",
                id,
                a.name(id),
                a.get(id).shape(),
                b.name(id),
                b.get(id).shape()
            )));
        }
    }
    Ok(())
}
