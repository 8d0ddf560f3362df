//! Named parameter storage shared by the encoder, pooling, and head.
//!
//! Parameters live here between steps. Each forward pass leases every
//! parameter onto a fresh tape through [`ParamStore::bind`]; after backward,
//! [`ParamStore::accumulate_grads`] folds the tape gradients into persistent
//! per-parameter buffers, which is what makes gradient accumulation across
//! micro-batches work.

use crate::tape::{Tape, TensorRef};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    /// Position in the store's allocation order.
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug)]
struct ParamEntry {
    name: String,
    tensor: Tensor,
    grad: Vec<f64>,
    /// Biases and layer-norm parameters are excluded from weight decay.
    no_decay: bool,
    /// Set when a backward pass has actually deposited a gradient.
    touched: bool,
}

#[derive(Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Maps every [`ParamId`] to its leaf on one particular tape.
pub struct Binding {
    refs: Vec<TensorRef>,
}

impl Binding {
    pub fn get(&self, id: ParamId) -> TensorRef {
        self.refs[id.0]
    }

    /// A binding over externally created leaves, in allocation order. The
    /// gradient-check suite uses this to drive a model from probe tensors.
    pub fn from_refs(refs: Vec<TensorRef>) -> Self {
        Binding { refs }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn alloc(&mut self, name: impl Into<String>, tensor: Tensor, no_decay: bool) -> ParamId {
        let id = self.entries.len();
        let n = tensor.numel();
        self.entries.push(ParamEntry {
            name: name.into(),
            tensor: tensor.with_grad(),
            grad: vec![0.0; n],
            no_decay,
            touched: false,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].tensor
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut Vec<f64> {
        &mut self.entries[id.0].tensor.values
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn grad_touched(&self, id: ParamId) -> bool {
        self.entries[id.0].touched
    }

    pub fn no_decay(&self, id: ParamId) -> bool {
        self.entries[id.0].no_decay
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
            e.touched = false;
        }
    }

    /// Leases every parameter onto `tape` as a gradient leaf.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let refs = self.entries.iter().map(|e| tape.leaf(&e.tensor)).collect();
        Binding { refs }
    }

    /// Adds the tape's gradients into the persistent buffers.
    pub fn accumulate_grads(&mut self, tape: &Tape, binding: &Binding) {
        for (entry, r) in self.entries.iter_mut().zip(&binding.refs) {
            if let Some(g) = tape.grad(*r) {
                for (acc, gi) in entry.grad.iter_mut().zip(g) {
                    *acc += gi;
                }
                entry.touched = true;
            }
        }
    }

    /// Overwrites a parameter's values, e.g. when loading a checkpoint.
    pub fn set_values(&mut self, id: ParamId, values: Vec<f64>) {
        assert_eq!(values.len(), self.entries[id.0].tensor.numel());
        self.entries[id.0].tensor.values = values;
    }
}
