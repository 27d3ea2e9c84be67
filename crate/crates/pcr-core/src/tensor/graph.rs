//! Recorded computation graph with reverse-mode differentiation.
//!
//! Operations append nodes to the owning [`Graph`]; node inputs always refer
//! to earlier nodes, so insertion order is a topological order and cycles are
//! impossible by construction. A graph is mutated only through `&mut self`,
//! i.e. only by its owning thread.

use crate::error::{Error, Result};

use super::ops::{self, BatchNormState, BnMode, BnSaved};
use super::{ConvSpec, Shape, Tensor};

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
    },
    Deconv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        spec: ConvSpec,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: BnSaved,
    },
    Relu {
        x: NodeId,
    },
    Sigmoid {
        x: NodeId,
    },
    GlobalAvgPool {
        x: NodeId,
    },
    ChannelScale {
        x: NodeId,
        s: NodeId,
    },
    ConcatChannels {
        parts: Vec<NodeId>,
    },
    Upsample2x {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    Sum {
        x: NodeId,
    },
    WeightedMse {
        pred: NodeId,
        target: Tensor,
        weights: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A single recorded forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn val(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Forward value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.val(id)
    }

    /// Gradient buffer of a node, populated by [`Graph::backward`].
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].value.grad()
    }

    /// Inserts an input or parameter tensor.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let bias = bias_slice("conv2d", self.val(b), spec.out_channels)?;
        let out = ops::conv2d(self.val(x), self.val(w), &bias, spec)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, spec: *spec }))
    }

    pub fn deconv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, spec: &ConvSpec) -> Result<NodeId> {
        let bias = bias_slice("deconv2d", self.val(b), spec.out_channels)?;
        let out = ops::deconv2d(self.val(x), self.val(w), &bias, spec)?;
        Ok(self.push(out, Op::Deconv2d { x, w, b, spec: *spec }))
    }

    pub fn batch_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        state: &mut BatchNormState,
        mode: BnMode,
    ) -> Result<NodeId> {
        let c = self.val(x).shape().c;
        let g = bias_slice("batch_norm", self.val(gamma), c)?;
        let b = bias_slice("batch_norm", self.val(beta), c)?;
        let (out, saved) = ops::batch_norm(self.val(x), &g, &b, state, mode)?;
        Ok(self.push(out, Op::BatchNorm { x, gamma, beta, saved }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = ops::relu(self.val(x));
        self.push(out, Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = ops::sigmoid(self.val(x));
        self.push(out, Op::Sigmoid { x })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let out = ops::global_avg_pool(self.val(x))?;
        Ok(self.push(out, Op::GlobalAvgPool { x }))
    }

    pub fn channel_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId> {
        let out = ops::channel_scale(self.val(x), self.val(s))?;
        Ok(self.push(out, Op::ChannelScale { x, s }))
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.val(p)).collect();
        let out = ops::concat_channels(&tensors)?;
        Ok(self.push(out, Op::ConcatChannels { parts: parts.to_vec() }))
    }

    pub fn upsample2x_nearest(&mut self, x: NodeId) -> NodeId {
        let out = ops::upsample2x_nearest(self.val(x));
        self.push(out, Op::Upsample2x { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = ops::add(self.val(a), self.val(b))?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let out = ops::scale(self.val(x), k);
        self.push(out, Op::Scale { x, k })
    }

    /// Sum of all elements, as a `1x1x1x1` node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = ops::sum(self.val(x));
        let out = Tensor::filled(Shape::new(1, 1, 1, 1), s);
        self.push(out, Op::Sum { x })
    }

    /// Weighted mean-squared error against a constant target, as a `1x1x1x1`
    /// node. `weights` holds one entry per `(sample, channel)` pair.
    pub fn weighted_mse(&mut self, pred: NodeId, target: &Tensor, weights: &[f64]) -> Result<NodeId> {
        let v = ops::weighted_mse(self.val(pred), target, weights)?;
        let out = Tensor::filled(Shape::new(1, 1, 1, 1), v);
        Ok(self.push(
            out,
            Op::WeightedMse {
                pred,
                target: target.clone(),
                weights: weights.to_vec(),
            },
        ))
    }

    /// Smallest absolute value feeding any ReLU in the recorded graph.
    /// Finite-difference harnesses use this to confirm the forward pass sits
    /// safely away from activation kinks.
    pub fn min_relu_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            if let Op::Relu { x } = node.op {
                for &v in self.val(x).data() {
                    margin = margin.min(v.abs());
                }
            }
        }
        margin
    }

    /// Reverse pass from a scalar node: fills the gradient buffer of every
    /// node the loss depends on (parameters and inputs included).
    /// Deterministic for fixed inputs.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {}", self.val(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let gy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let gy_t = Tensor::from_grad(self.nodes[i].value.shape(), gy.clone());
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Conv2d { x, w, b, spec } => {
                    let xs = self.val(*x).shape();
                    let gx = ops::conv2d_grad_input(&gy_t, self.val(*w), spec, (xs.h, xs.w))?;
                    let gw = ops::conv2d_grad_weight(self.val(*x), &gy_t, spec)?;
                    let gb = ops::grad_bias(&gy_t);
                    accumulate(&mut grads, *x, gx.data());
                    accumulate(&mut grads, *w, gw.data());
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Deconv2d { x, w, b, spec } => {
                    let xs = self.val(*x).shape();
                    let gx = ops::deconv2d_grad_input(&gy_t, self.val(*w), spec, (xs.h, xs.w))?;
                    let gw = ops::deconv2d_grad_weight(self.val(*x), &gy_t, spec)?;
                    let gb = ops::grad_bias(&gy_t);
                    accumulate(&mut grads, *x, gx.data());
                    accumulate(&mut grads, *w, gw.data());
                    accumulate(&mut grads, *b, &gb);
                }
                Op::BatchNorm { x, gamma, beta, saved } => {
                    let c = self.val(*x).shape().c;
                    let g = bias_slice("batch_norm", self.val(*gamma), c)?;
                    let (gx, ggamma, gbeta) =
                        ops::batch_norm_backward(self.val(*x), &g, saved, &gy_t);
                    accumulate(&mut grads, *x, gx.data());
                    accumulate(&mut grads, *gamma, &ggamma);
                    accumulate(&mut grads, *beta, &gbeta);
                }
                Op::Relu { x } => {
                    let gx = ops::relu_backward(self.val(*x), &gy_t);
                    accumulate(&mut grads, *x, gx.data());
                }
                Op::Sigmoid { x } => {
                    let gx = ops::sigmoid_backward(&self.nodes[i].value, &gy_t);
                    accumulate(&mut grads, *x, gx.data());
                }
                Op::GlobalAvgPool { x } => {
                    let gx = ops::global_avg_pool_backward(self.val(*x).shape(), &gy_t);
                    accumulate(&mut grads, *x, gx.data());
                }
                Op::ChannelScale { x, s } => {
                    let (gx, gs) = ops::channel_scale_backward(self.val(*x), self.val(*s), &gy_t);
                    accumulate(&mut grads, *x, gx.data());
                    accumulate(&mut grads, *s, gs.data());
                }
                Op::ConcatChannels { parts } => {
                    let parts = parts.clone();
                    let mut offset = 0;
                    for p in parts {
                        let pc = self.val(p).shape().c;
                        let gp = ops::slice_channels(&gy_t, offset, pc)?;
                        accumulate(&mut grads, p, gp.data());
                        offset += pc;
                    }
                }
                Op::Upsample2x { x } => {
                    let gx = ops::upsample2x_backward(&gy_t);
                    accumulate(&mut grads, *x, gx.data());
                }
                Op::Add { a, b } => {
                    accumulate(&mut grads, *a, gy_t.data());
                    accumulate(&mut grads, *b, gy_t.data());
                }
                Op::Scale { x, k } => {
                    let gx = ops::scale(&gy_t, *k);
                    accumulate(&mut grads, *x, gx.data());
                }
                Op::Sum { x } => {
                    let g = gy[0];
                    let xs = self.val(*x).shape();
                    accumulate(&mut grads, *x, &vec![g; xs.len()]);
                }
                Op::WeightedMse { pred, target, weights } => {
                    let gp = ops::weighted_mse_grad(self.val(*pred), target, weights, gy[0]);
                    accumulate(&mut grads, *pred, gp.data());
                }
            }
            self.nodes[i].value.set_grad(Some(gy));
        }

        // Nodes the loss never touched keep an explicit zero gradient so the
        // caller can read a buffer for every leaf.
        for i in 0..=loss.0 {
            if self.nodes[i].value.grad().is_none() {
                let len = self.nodes[i].value.len();
                self.nodes[i].value.set_grad(Some(vec![0.0; len]));
            }
        }
        Ok(())
    }
}

impl Tensor {
    /// Internal helper: wraps a gradient buffer in a tensor so backward
    /// kernels can reuse forward signatures.
    fn from_grad(shape: Shape, data: Vec<f64>) -> Tensor {
        debug_assert_eq!(shape.len(), data.len());
        let mut t = Tensor::zeros(shape);
        t.data_mut().copy_from_slice(&data);
        t
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: NodeId, contribution: &[f64]) {
    match &mut grads[id.index()] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot => *slot = Some(contribution.to_vec()),
    }
}

fn bias_slice(op: &'static str, t: &Tensor, channels: usize) -> Result<Vec<f64>> {
    let s = t.shape();
    if s.n != 1 || s.h != 1 || s.w != 1 || s.c != channels {
        return Err(Error::ShapeMismatch {
            op,
            dim: "per-channel vector",
            expected: channels,
            got: s.len(),
        });
    }
    Ok(t.data().to_vec())
}
