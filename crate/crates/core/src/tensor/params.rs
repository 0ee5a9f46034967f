use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::tape::Gradients;
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    name: String,
    value: Arc<Tensor>,
    grad: Option<Tensor>,
    row_sparse: bool,
}

impl Param {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn grad(&self) -> Option<&Tensor> {
        self.grad.as_ref()
    }

    /// Embedding-like tables: the optimizer leaves rows with an all-zero
    /// gradient untouched (value and moments).
    pub fn is_row_sparse(&self) -> bool {
        self.row_sparse
    }

    pub(crate) fn value_arc(&self) -> &Arc<Tensor> {
        &self.value
    }

    pub(crate) fn value_and_grad_mut(&mut self) -> (&mut Tensor, Option<&Tensor>) {
        (Arc::make_mut(&mut self.value), self.grad.as_ref())
    }
}

/// Named, ordered collection of trainable tensors with gradient buffers.
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
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: self.params.clone(),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed),
            params: Vec::new(),
        }
    }

    pub(crate) fn id(&self) -> u64 {
        self.id
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, false)
    }

    pub fn add_row_sparse(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.push(name.into(), value, true)
    }

    fn push(&mut self, name: String, value: Tensor, row_sparse: bool) -> ParamId {
        self.params.push(Param {
            name,
            value: Arc::new(value),
            grad: None,
            row_sparse,
        });
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

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    /// Mutable access to a parameter value (initialization, tests).
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.params[id.0];
        if slot.value.shape() != value.shape() {
            return Err(Error::Shape {
                op: "param_set",
                shapes: vec![slot.value.shape().to_vec(), value.shape().to_vec()],
            });
        }
        slot.value = Arc::new(value);
        Ok(())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.params[id.0].grad.as_ref()
    }

    /// Resets every gradient buffer to zeros.
    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            match &mut p.grad {
                Some(g) => g.data_mut().fill(0.0),
                None => p.grad = Some(Tensor::zeros(p.value.shape())),
            }
        }
    }

    /// Drops every gradient buffer; an optimizer step afterwards is a usage error.
    pub fn clear_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Adds the gradients of every parameter of this store that appeared on
    /// the tape. Gradients accumulate across calls until `zero_grad`.
    pub fn accumulate(&mut self, grads: &Gradients) {
        for (store, index, grad) in grads.param_grads() {
            if store != self.id {
                continue;
            }
            let p = &mut self.params[index];
            let buf = p.grad.get_or_insert_with(|| Tensor::zeros(p.value.shape()));
            for (b, g) in buf.data_mut().iter_mut().zip(grad.data()) {
                *b += g;
            }
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}
