//! Dense row-major `f64` tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Tensors created through
//! [`Graph::leaf`] are differentiable leaves; every op whose inputs include a
//! tracked tensor appends a node holding its backward closure. Tensors with
//! no tracked input are constants and record nothing, which makes inference
//! free of tape overhead.
//!
//! Backward walks the tape once in reverse creation order, so gradient
//! accumulation order is fixed and results are bit-reproducible.

mod kernels;
pub mod opcount;
mod ops;
mod rearrange;

use std::cell::RefCell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::error::{dim_err, usage_err, Result};

pub use ops::{gelu_scalar, MaskBias};

pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &mut GradSink)>;

struct Node {
    len: usize,
    backward: Option<BackwardFn>,
}

pub(crate) struct GraphInner {
    nodes: RefCell<Vec<Node>>,
}

/// A computation tape. Cheap to clone; clones share the tape.
#[derive(Clone)]
pub struct Graph {
    inner: Rc<GraphInner>,
}

#[derive(Clone)]
pub(crate) struct NodeRef {
    graph: Rc<GraphInner>,
    id: usize,
}

#[derive(Clone)]
pub struct Tensor {
    data: Rc<Vec<f64>>,
    shape: Vec<usize>,
    node: Option<NodeRef>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("node_id", &self.node_id())
            .field("data", &self.data)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Untracked tensor. Fails when `data` does not fill `shape`.
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if numel(shape) != data.len() {
            return dim_err(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(shape),
                data.len()
            ));
        }
        Ok(Self::from_parts(shape.to_vec(), data))
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Self {
            data: Rc::new(data),
            shape,
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::from_parts(shape.to_vec(), vec![0.0; numel(shape)])
    }

    pub fn scalar(v: f64) -> Self {
        Self::from_parts(vec![], vec![v])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return usage_err(format!("item() on tensor of shape {:?}", self.shape));
        }
        Ok(self.data[0])
    }

    /// Position of this tensor on its tape, if tracked.
    pub fn node_id(&self) -> Option<usize> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, detached from any tape.
    pub fn detach(&self) -> Tensor {
        Tensor {
            data: Rc::clone(&self.data),
            shape: self.shape.clone(),
            node: None,
        }
    }

    /// Runs reverse-mode differentiation from this scalar.
    pub fn backward(&self) -> Result<Gradients> {
        if self.numel() != 1 {
            return usage_err(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape
            ));
        }
        let Some(node) = &self.node else {
            return Ok(Gradients::default());
        };
        let nodes = node.graph.nodes.borrow();
        let mut sink = GradSink {
            lens: nodes.iter().map(|n| n.len).collect(),
            grads: vec![None; node.id + 1],
        };
        sink.grads[node.id] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for id in (0..=node.id).rev() {
            let Some(g) = sink.grads[id].take() else {
                continue;
            };
            match &nodes[id].backward {
                Some(f) => f(&g, &mut sink),
                None => {
                    leaves.insert(id, g);
                }
            }
        }
        Ok(Gradients {
            graph: Some(Rc::clone(&node.graph)),
            leaves,
        })
    }

    /// Appends an op result to the tape shared by `inputs`. `make_backward`
    /// receives each input's node id (None for untracked inputs) and is only
    /// invoked when at least one input is tracked.
    pub(crate) fn record<F>(
        inputs: &[&Tensor],
        shape: Vec<usize>,
        data: Vec<f64>,
        make_backward: F,
    ) -> Tensor
    where
        F: FnOnce(Vec<Option<usize>>) -> BackwardFn,
    {
        debug_assert_eq!(numel(&shape), data.len());
        let graph = inputs.iter().find_map(|t| t.node.as_ref().map(|n| &n.graph));
        let Some(graph) = graph else {
            return Tensor::from_parts(shape, data);
        };
        let ids: Vec<Option<usize>> = inputs
            .iter()
            .map(|t| {
                t.node.as_ref().map(|n| {
                    assert!(
                        Rc::ptr_eq(&n.graph, graph),
                        "tensors from different graphs combined in one op"
                    );
                    n.id
                })
            })
            .collect();
        let backward = make_backward(ids);
        let graph = Rc::clone(graph);
        let id = {
            let mut nodes = graph.nodes.borrow_mut();
            nodes.push(Node {
                len: data.len(),
                backward: Some(backward),
            });
            nodes.len() - 1
        };
        Tensor {
            data: Rc::new(data),
            shape,
            node: Some(NodeRef { graph, id }),
        }
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(GraphInner {
                nodes: RefCell::new(Vec::new()),
            }),
        }
    }

    /// Differentiable leaf holding `data`.
    pub fn leaf(&self, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, data)?;
        Ok(self.track(&t))
    }

    /// Differentiable leaf sharing the values of `t`.
    pub fn track(&self, t: &Tensor) -> Tensor {
        let id = {
            let mut nodes = self.inner.nodes.borrow_mut();
            nodes.push(Node {
                len: t.numel(),
                backward: None,
            });
            nodes.len() - 1
        };
        Tensor {
            data: Rc::clone(&t.data),
            shape: t.shape.clone(),
            node: Some(NodeRef {
                graph: Rc::clone(&self.inner),
                id,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Gradient accumulator handed to backward closures.
pub(crate) struct GradSink {
    lens: Vec<usize>,
    grads: Vec<Option<Vec<f64>>>,
}

impl GradSink {
    /// Mutable gradient buffer of node `id`, zero-initialized on first use.
    pub(crate) fn buf(&mut self, id: usize) -> &mut [f64] {
        let len = self.lens[id];
        self.grads[id].get_or_insert_with(|| vec![0.0; len])
    }

    pub(crate) fn add(&mut self, id: usize, g: &[f64]) {
        let buf = self.buf(id);
        for (b, v) in buf.iter_mut().zip(g) {
            *b += v;
        }
    }
}

/// Leaf gradients produced by one backward pass.
#[derive(Default)]
pub struct Gradients {
    graph: Option<Rc<GraphInner>>,
    leaves: HashMap<usize, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to leaf `t`; `None` when `t` is not a
    /// leaf of this graph or the loss does not depend on it.
    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        let node = t.node.as_ref()?;
        let graph = self.graph.as_ref()?;
        if !Rc::ptr_eq(graph, &node.graph) {
            return None;
        }
        self.leaves.get(&node.id).map(Vec::as_slice)
    }

    /// Like [`Gradients::get`], but zeros when the loss does not reach `t`.
    pub fn get_or_zeros(&self, t: &Tensor) -> Vec<f64> {
        self.get(t)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; t.numel()])
    }
}
