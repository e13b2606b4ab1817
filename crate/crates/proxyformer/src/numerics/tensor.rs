//! Flat-storage tensors and the named parameter store.
//!
//! Tensors are row-major `Vec<f64>` with an explicit shape; all layout
//! arithmetic lives here. Scalars are rank-1 tensors of length 1.

use std::collections::HashMap;

use crate::error::{Error, Result};

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Tensor {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::shape(format!(
                "data length {} does not fill shape {:?} ({} elements)",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor by evaluating `f` at every flat index.
    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the shape without touching data.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = flat_index(&self.shape, index);
        self.data[i] = value;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    let st = strides(shape);
    index.iter().zip(&st).map(|(i, s)| i * s).sum()
}

/// Handle to a parameter inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

struct ParamEntry {
    name: String,
    value: Tensor,
    grad: Vec<f64>,
}

/// Named, ordered store of trainable parameters.
///
/// Parameters live here across training steps; each step leases them into a
/// fresh tape as leaf nodes and receives gradients back. Gradient
/// accumulation is additive, so callers zero gradients between steps.
#[derive(Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> ParamSet {
        ParamSet::default()
    }

    /// Registers a named parameter. Names must be unique; registration order
    /// is the canonical iteration order everywhere (init, checkpoints,
    /// gradient reports).
    pub fn register(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::invalid(format!(
                "parameter name registered twice: {name}"
            )));
        }
        let id = self.entries.len();
        let grad = vec![0.0; value.numel()];
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            grad,
        });
        self.by_name.insert(name.to_string(), id);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id_by_name(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
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

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    /// Simultaneous mutable value / immutable gradient view of one entry,
    /// so an optimizer can update in place without copying the gradient.
    pub fn value_and_grad_mut(&mut self, id: ParamId) -> (&mut [f64], &[f64]) {
        let e = &mut self.entries[id.0];
        (e.value.data_mut(), &e.grad)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, delta: &[f64]) {
        let g = &mut self.entries[id.0].grad;
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn total_elements(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }
}

/// Head count and width of one attention operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<AttentionConfig> {
        if model_dim == 0 || num_heads == 0 {
            return Err(Error::invalid(format!(
                "attention dims must be positive, got model_dim={model_dim} num_heads={num_heads}"
            )));
        }
        if model_dim % num_heads != 0 {
            return Err(Error::invalid(format!(
                "model_dim {model_dim} not divisible by num_heads {num_heads}"
            )));
        }
        Ok(AttentionConfig {
            model_dim,
            num_heads,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}
