//! Named parameter tensors and their per-tape bindings.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::autodiff::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("unknown parameter '{0}'")]
    Missing(String),
    #[error("parameter '{0}' registered twice")]
    Duplicate(String),
}

/// Ordered collection of named tensors. Order is registration order and is
/// what checkpoints and the optimizer iterate over.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Arc<Tensor>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<usize, ParamError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(ParamError::Duplicate(name));
        }
        let id = self.names.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(Arc::new(value));
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize, ParamError> {
        self.index.get(name).copied().ok_or_else(|| ParamError::Missing(name.to_owned()))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ParamError> {
        Ok(&self.tensors[self.id(name)?])
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn tensor(&self, id: usize) -> &Tensor {
        &self.tensors[id]
    }

    pub fn shared(&self, id: usize) -> Arc<Tensor> {
        Arc::clone(&self.tensors[id])
    }

    /// Mutable access; clones the tensor first if a tape still shares it.
    pub fn tensor_mut(&mut self, id: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.tensors[id])
    }

    pub fn set(&mut self, id: usize, value: Tensor) {
        self.tensors[id] = Arc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter().map(|t| &**t))
    }

    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

/// Lazily registers store parameters on one tape, so each step only pays
/// for the tensors it touches.
pub struct Binder<'s> {
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
    frozen: Vec<bool>,
}

impl<'s> Binder<'s> {
    pub fn new(store: &'s ParamStore, trainable: bool) -> Self {
        Self {
            store,
            vars: vec![None; store.len()],
            trainable,
            frozen: vec![false; store.len()],
        }
    }

    /// Binds `name` without a gradient even on a trainable binder.
    pub fn freeze(&mut self, name: &str) -> Result<(), ParamError> {
        let id = self.store.id(name)?;
        self.frozen[id] = true;
        Ok(())
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Uses `var` in place of the stored tensor for `name`.
    pub fn preset(&mut self, name: &str, var: Var) -> Result<(), ParamError> {
        let id = self.store.id(name)?;
        self.vars[id] = Some(var);
        Ok(())
    }

    pub fn bind(&mut self, tape: &mut Tape, name: &str) -> Result<Var, ParamError> {
        let id = self.store.id(name)?;
        Ok(self.bind_id(tape, id))
    }

    pub fn bind_id(&mut self, tape: &mut Tape, id: usize) -> Var {
        let grad = self.trainable && !self.frozen[id];
        *self.vars[id].get_or_insert_with(|| tape.leaf_shared(self.store.shared(id), grad))
    }

    /// Gradient per store slot; `None` for parameters this tape never used
    /// or that the loss does not depend on.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| grads.get(v).cloned()))
            .collect()
    }
}
