//! Central registry of named trainable tensors.
//!
//! Layers hold [`ParamId`] handles; the store owns the values. Binding clones
//! every parameter into a [`Graph`] as leaves in registration order, which
//! also fixes the update and checkpoint order.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    pub(crate) fn from_index(index: usize) -> Self {
        ParamId(index)
    }

    /// Builds the id of the i-th registered parameter.
    pub fn from_index_pub(index: usize) -> Self {
        ParamId(index)
    }

    pub fn index(&self) -> usize {
        self.0
    }
}

pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Registers a tensor with entries drawn from a zero-mean normal.
    pub fn register_normal(
        &mut self,
        name: impl Into<String>,
        shape: Shape,
        std: f64,
        rng: &mut impl Rng,
    ) -> ParamId {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data: Vec<f64> = (0..shape.len()).map(|_| normal.sample(rng)).collect();
        self.register(name, Tensor::from_vec(shape, data).expect("sampled values are finite"))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar parameter count.
    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(|n| n.as_str()).zip(self.tensors.iter())
    }

    /// Inserts every parameter into the graph as a leaf, in registration
    /// order.
    pub fn bind(&self, g: &mut Graph) -> BoundParams {
        let ids = self.tensors.iter().map(|t| g.leaf(t.clone())).collect();
        BoundParams { ids }
    }

    /// One full-gradient descent step over every parameter, reading the
    /// gradients the graph computed for the bound leaves.
    pub fn apply_sgd(&mut self, g: &Graph, bound: &BoundParams, lr: f64) -> Result<()> {
        if bound.ids.len() != self.tensors.len() {
            return Err(Error::invalid(
                "apply_sgd",
                "bound parameter list does not match the store",
            ));
        }
        for (tensor, &node) in self.tensors.iter_mut().zip(&bound.ids) {
            let grad = g
                .grad(node)
                .ok_or_else(|| Error::invalid("apply_sgd", "missing gradient; run backward first"))?;
            for (p, gv) in tensor.data_mut().iter_mut().zip(grad) {
                *p -= lr * gv;
            }
        }
        Ok(())
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Graph leaves for one forward pass, parallel to the store.
pub struct BoundParams {
    ids: Vec<NodeId>,
}

impl BoundParams {
    pub fn node(&self, id: ParamId) -> NodeId {
        self.ids[id.0]
    }
}
