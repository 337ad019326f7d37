//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only tape. Every operation pushes a node holding
//! its forward value and the ids of its inputs, so node order is already a
//! topological order and [`Tensor::backward`] is one reverse sweep.
//!
//! ```
//! use resroute::tensor::Graph;
//!
//! let g = Graph::new();
//! let x = g.param(vec![1.0, 2.0, 3.0], &[3]).unwrap();
//! let y = x.mul(&x).unwrap().sum();
//! y.backward().unwrap();
//! assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
//! ```

pub(crate) mod kernels;
mod lstm;
mod ops;

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

pub use lstm::{lstm_step, LstmWeights};
pub use ops::{resample_plain, softmax};

#[cfg(test)]
mod tests;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    Sum(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    Conv2d {
        x: usize,
        k: usize,
        stride: usize,
        padding: usize,
    },
    ChannelBias {
        x: usize,
        b: usize,
    },
    Relu(usize),
    Sigmoid(usize),
    Tanh(usize),
    Recip(usize),
    Resample {
        x: usize,
        ry: Rc<[f64]>,
        rx: Rc<[f64]>,
    },
    GlobalAvgPool(usize),
    Reshape(usize),
    Slice {
        x: usize,
        start: usize,
    },
    Concat(Vec<usize>),
    Softmax(usize),
    LogSoftmax(usize),
    CrossEntropy {
        logits: usize,
        label: usize,
    },
    StraightThrough {
        soft: usize,
    },
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Recording tape. Single-threaded; independent graphs share nothing.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Tensor<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Tensor<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn leaf(&self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Tensor<'_>> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("dimensions must be positive, got {shape:?}"),
            });
        }
        if data.len() != numel(shape) {
            return Err(Error::Shape {
                op: "leaf",
                detail: format!("{} values for shape {shape:?}", data.len()),
            });
        }
        Ok(self.push(shape.to_vec(), data, requires_grad, Op::Leaf))
    }

    /// Leaf that receives gradients.
    pub fn param(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.leaf(data, shape, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, data: Vec<f64>, shape: &[usize]) -> Result<Tensor<'_>> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&self, v: f64) -> Tensor<'_> {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn zeros(&self, shape: &[usize]) -> Result<Tensor<'_>> {
        self.constant(vec![0.0; numel(shape)], shape)
    }

    /// Drop every stored gradient.
    pub fn zero_grad(&self) {
        for n in self.nodes.borrow_mut().iter_mut() {
            n.grad = None;
        }
    }

    pub(crate) fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Tensor<'_> {
        debug_assert_eq!(value.len(), numel(&shape));
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Tensor {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn with_nodes<R>(&self, f: impl FnOnce(&[Node]) -> R) -> R {
        f(&self.nodes.borrow())
    }
}

impl<'g> Tensor<'g> {
    pub fn graph(&self) -> &'g Graph {
        self.graph
    }

    pub fn shape(&self) -> Vec<usize> {
        self.graph.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        numel(&self.graph.nodes.borrow()[self.id].shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.graph.nodes.borrow()[self.id].requires_grad
    }

    pub fn value(&self) -> Vec<f64> {
        self.graph.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.graph.nodes.borrow()[self.id].value)
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let nodes = self.graph.nodes.borrow();
        let n = &nodes[self.id];
        assert_eq!(n.value.len(), 1, "item() on tensor of shape {:?}", n.shape);
        n.value[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.graph.nodes.borrow()[self.id].grad.clone()
    }

    /// Stored gradient, or zeros when backward never reached this node.
    pub fn grad_or_zero(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Tensor<'g> {
        let (shape, value) = {
            let nodes = self.graph.nodes.borrow();
            let n = &nodes[self.id];
            (n.shape.clone(), n.value.clone())
        };
        self.graph.push(shape, value, false, Op::Leaf)
    }

    /// Accumulate d(self)/d(node) into every reachable node that requires a
    /// gradient. Calling twice without [`Graph::zero_grad`] adds the gradients.
    pub fn backward(&self) -> Result<()> {
        let shape = self.shape();
        if numel(&shape) != 1 {
            return Err(Error::NotScalar(shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = {
            let nodes = self.graph.nodes.borrow();
            let mut g = Vec::with_capacity(self.id + 1);
            g.resize_with(self.id + 1, || None);
            if nodes[self.id].requires_grad {
                g[self.id] = Some(vec![1.0]);
            }
            g
        };
        {
            let nodes = self.graph.nodes.borrow();
            for id in (0..=self.id).rev() {
                let Some(g) = grads[id].take() else {
                    continue;
                };
                ops::backward_rule(&nodes, id, &g, &mut grads);
                grads[id] = Some(g);
            }
        }
        let mut nodes = self.graph.nodes.borrow_mut();
        for (node, g) in nodes.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }
        Ok(())
    }
}
