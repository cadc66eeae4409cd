//! Flat parameter storage shared by every layer of a model.

use std::sync::Arc;

use crate::error::{FlowError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Connection weights; the only kind that is ℓ2-regularised.
    Weight,
    Bias,
    /// Batch-norm shift and log-scale.
    Norm,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub kind: ParamKind,
    /// Binary mask for weights whose masked entries must stay at zero.
    pub mask: Option<Arc<Tensor>>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, kind: ParamKind, mask: Option<Arc<Tensor>>) -> ParamId {
        if let Some(m) = &mask {
            debug_assert_eq!(m.shape(), value.shape());
        }
        self.params.push(Param { name: name.into(), value, kind, mask });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    /// Record every parameter on `tape`, as gradient leaves when `grad`.
    pub fn bind(&self, tape: &mut Tape, grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| if grad { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) })
            .collect()
    }

    pub fn snapshot(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(FlowError::dim("restore", format!("{} values for {} parameters", values.len(), self.params.len())));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(FlowError::dim("restore", format!("{}: {:?} vs {:?}", p.name, p.value.shape(), v.shape())));
            }
            p.value = v.clone();
        }
        Ok(())
    }

    /// Number of scalar entries, masked weights counted only where unmasked.
    pub fn effective_count(&self, kind: ParamKind) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == kind)
            .map(|p| match &p.mask {
                Some(m) => m.sum() as usize,
                None => p.value.len(),
            })
            .sum()
    }
}
