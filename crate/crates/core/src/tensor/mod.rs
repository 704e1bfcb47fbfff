//! Dense f64 tensors with tape-style reverse-mode differentiation.
//!
//! A tensor either is a constant (no graph linkage) or carries a [`Node`]
//! recording how it was produced. Ops only record a node when at least one
//! input is tracked, so inference over constant weights builds no graph.
//! Node ids grow monotonically, which gives a valid reverse topological
//! order for free during [`backward`].

mod autodiff;
mod check;
mod ops;
mod optim;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

pub use autodiff::{backward, Gradients};
pub use check::grad_check;
pub use optim::{adam_step, AdamState};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_NODE.fetch_add(1, Ordering::Relaxed)
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) id: u64,
    pub(crate) op: Op,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(Tensor, Tensor),
    Add(Tensor, Tensor),
    Sub(Tensor, Tensor),
    Mul(Tensor, Tensor),
    Scale(Tensor, f64),
    AddRowVec(Tensor, Tensor),
    AddColVec(Tensor, Tensor),
    Reshape(Tensor),
    Gather(Tensor, Arc<Vec<usize>>),
    Concat(Vec<Tensor>),
    Softmax(Tensor, Arc<Vec<f64>>),
    Gelu(Tensor),
    Silu(Tensor),
    LayerNorm {
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        xhat: Arc<Vec<f64>>,
        inv_std: Arc<Vec<f64>>,
    },
    Sum(Tensor),
    Square(Tensor),
}

impl Op {
    pub(crate) fn parents(&self) -> Vec<&Tensor> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRowVec(a, b)
            | Op::AddColVec(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::Reshape(a)
            | Op::Gather(a, _)
            | Op::Softmax(a, _)
            | Op::Gelu(a)
            | Op::Silu(a)
            | Op::Sum(a)
            | Op::Square(a) => vec![a],
            Op::Concat(parts) => parts.iter().collect(),
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
        }
    }
}

/// Row-major n-dimensional array of f64.
#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    node: Option<Arc<Node>>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim("Tensor::new", shape, &[data.len()]));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; numel]),
            node: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full(&[], value)
    }

    pub fn randn(shape: &[usize], std: f64, rng: &mut Stream) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(rng::normal_vec(rng, numel, std)),
            node: None,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Tensor {
            shape: vec![n, n],
            data: Arc::new(data),
            node: None,
        }
    }

    /// Returns a trainable leaf sharing this tensor's values.
    pub fn param(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: Some(Arc::new(Node {
                id: next_id(),
                op: Op::Leaf,
            })),
        }
    }

    /// Drops graph linkage, keeping values.
    pub fn detach(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
        }
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

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Graph id for tracked tensors.
    pub fn id(&self) -> Option<u64> {
        self.node.as_ref().map(|n| n.id)
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    /// Replaces the values of a leaf in place, keeping its identity.
    /// Used by optimizers; refuses non-leaf tensors.
    pub fn set_data(&mut self, data: Vec<f64>) -> Result<()> {
        if data.len() != self.numel() {
            return Err(Error::dim("set_data", &self.shape, &[data.len()]));
        }
        if let Some(node) = &self.node {
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::Contract("set_data on a non-leaf tensor".into()));
            }
        }
        self.data = Arc::new(data);
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise map that is not tracked.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
            node: None,
        }
    }

    /// Bitwise equality of shape and values.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim("max_abs_diff", &self.shape, &other.shape));
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<f64>, op: impl FnOnce() -> Op, tracked: bool) -> Self {
        Tensor {
            shape,
            data: Arc::new(data),
            node: tracked.then(|| {
                Arc::new(Node {
                    id: next_id(),
                    op: op(),
                })
            }),
        }
    }

    pub(crate) fn node(&self) -> Option<&Arc<Node>> {
        self.node.as_ref()
    }

    pub(crate) fn data_arc(&self) -> &Arc<Vec<f64>> {
        &self.data
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_numel() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert!(!t.requires_grad());
        assert!(t.param().requires_grad());
        assert_eq!(Tensor::scalar(3.0).item().unwrap(), 3.0);
    }

    #[test]
    fn set_data_keeps_leaf_identity() {
        let mut p = Tensor::zeros(&[2]).param();
        let id = p.id();
        p.set_data(vec![1.0, 2.0]).unwrap();
        assert_eq!(p.id(), id);
        assert_eq!(p.data(), &[1.0, 2.0]);
        let derived = p.scale(2.0);
        let mut d = derived.clone();
        assert!(d.set_data(vec![0.0, 0.0]).is_err());
    }
}
