//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Design: a [`Tensor`] is a value (shape + shared flat buffer); a [`Tape`]
//! records the operations applied to tensors that require gradients and can
//! replay them in reverse. Every forward op is eager; nodes are only recorded
//! when a gradient will be needed, so the same ops double as a plain inference
//! path on untracked tensors.
//!
//! The tape is confined to one thread. Tensors themselves are `Send + Sync`
//! (the buffer is an `Arc`), so values can cross threads freely; concurrent
//! training runs each use their own tape.
//!
//! Determinism: all accumulations run in fixed row-major order, so a given
//! sequence of ops is bit-reproducible run to run.

mod backward;
pub mod gradcheck;
mod ops;

use std::sync::Arc;

use crate::error::{Error, Result};

pub use gradcheck::{central_diff_grad, finite_difference_check, max_rel_error};

pub type NodeId = usize;

/// Dense n-dimensional array of f64 in row-major order.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
    node: Option<NodeId>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, checking that `shape` accounts for every element.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape(format!("zero extent in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} wants {n} elements, data has {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n]).expect("zeros: positive extents")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![value; n]).expect("full: positive extents")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::new(vec![1], vec![value]).expect("scalar")
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> f64) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|i| f(i)).collect();
        Tensor::new(shape, data).expect("from_fn: positive extents")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::shape(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    /// Gradient installed by [`Gradients::install`], if any.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Mutates the underlying buffer in place (copy-on-write if shared).
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Same buffer, new shape. Element count must match.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "reshape {:?} -> {shape:?}: element count mismatch",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: Arc::clone(&self.data),
            requires_grad: false,
            node: None,
            grad: None,
        })
    }

    pub(crate) fn tracked(shape: Vec<usize>, data: Arc<Vec<f64>>, node: NodeId) -> Tensor {
        Tensor {
            shape,
            data,
            requires_grad: true,
            node: Some(node),
            grad: None,
        }
    }

    pub(crate) fn untracked(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor {
            shape,
            data: Arc::new(data),
            requires_grad: false,
            node: None,
            grad: None,
        }
    }

    pub(crate) fn buffer(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }
}

/// Operation kinds the tape can replay backwards.
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar,
    MulScalar(f64),
    Abs,
    Exp,
    Ln,
    Sqrt,
    Relu,
    Gelu,
    Matmul,
    Softmax { axis: usize },
    /// Stride-1 convolution with odd kernel and same zero padding.
    Conv2d,
    /// Mean over the last two axes.
    AvgPoolAll,
    /// Bilinear sampling of `[C,H,W]` at `[B,h,w,2]` normalized coordinates.
    GridSample,
    /// `out[i] = in[map[i]]`; indices may repeat.
    Gather { map: Arc<Vec<usize>> },
    Concat0,
    Reshape,
    SwapLast2,
    SumAll,
    MeanAll,
}

/// Input snapshot held by a tape node: enough to run the backward formula
/// without keeping the caller's `Tensor` alive.
#[derive(Clone, Debug)]
pub(crate) struct Saved {
    pub node: Option<NodeId>,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

impl Saved {
    fn of(t: &Tensor) -> Saved {
        Saved {
            node: t.node,
            shape: t.shape.clone(),
            data: Arc::clone(&t.data),
        }
    }
}

#[derive(Debug)]
pub(crate) struct Node {
    pub op: Op,
    pub inputs: Vec<Saved>,
    pub out_shape: Vec<usize>,
    pub out_data: Arc<Vec<f64>>,
}

/// Records differentiable operations in topological order.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    param_nodes: Vec<(usize, NodeId)>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inserts a gradient-requiring leaf holding a copy-free view of `t`.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.nodes.len();
        let data = t.buffer();
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            out_shape: t.shape.to_vec(),
            out_data: Arc::clone(&data),
        });
        Tensor::tracked(t.shape.to_vec(), data, id)
    }

    /// Leaf tied to an optimizer parameter slot; the mapping is consumed by
    /// the training step to route gradients back to storage.
    pub fn watch_param(&mut self, slot: usize, t: &Tensor) -> Tensor {
        let leaf = self.leaf(t);
        self.param_nodes
            .push((slot, leaf.node.expect("leaf is tracked")));
        leaf
    }

    pub fn param_nodes(&self) -> &[(usize, NodeId)] {
        &self.param_nodes
    }

    pub(crate) fn record(
        &mut self,
        op: Op,
        inputs: Vec<&Tensor>,
        out_shape: Vec<usize>,
        out_data: Vec<f64>,
    ) -> Tensor {
        let tracked = inputs.iter().any(|t| t.node.is_some());
        if !tracked {
            return Tensor::untracked(out_shape, out_data);
        }
        let data = Arc::new(out_data);
        let id = self.nodes.len();
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|t| Saved::of(t)).collect(),
            out_shape: out_shape.clone(),
            out_data: Arc::clone(&data),
        });
        Tensor::tracked(out_shape, data, id)
    }

    /// Reverse pass from a scalar loss. Visits each node exactly once in
    /// reverse topological order; fan-out gradients sum.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        let root = loss
            .node
            .ok_or_else(|| Error::shape("backward: loss is not on the tape"))?;
        if loss.numel() != 1 {
            return Err(Error::shape(format!(
                "backward: loss must be scalar, got shape {:?}",
                loss.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root] = Some(vec![1.0]);
        for id in (0..=root).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            backward::propagate(&self.nodes[id], &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { by_node: grads })
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `t`, if `t` is on the tape and
    /// was reached by the reverse pass.
    pub fn of(&self, t: &Tensor) -> Option<&[f64]> {
        t.node.and_then(|id| self.node(id))
    }

    pub fn node(&self, id: NodeId) -> Option<&[f64]> {
        self.by_node.get(id).and_then(|g| g.as_deref())
    }

    /// Copies the gradient into the tensor's own `grad` field.
    pub fn install(&self, t: &mut Tensor) {
        t.grad = self.of(t).map(|g| g.to_vec());
    }
}

pub(crate) fn accumulate(slot: &mut Option<Vec<f64>>, len: usize, add: impl FnOnce(&mut [f64])) {
    let buf = slot.get_or_insert_with(|| vec![0.0; len]);
    add(buf);
}
