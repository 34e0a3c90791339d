//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every op on tensors that require gradients records its inputs in the
//! result, building a DAG. [`Tensor::backward`] walks that DAG in reverse
//! creation order (a valid reverse topological order, since inputs are
//! always created before outputs) and accumulates gradients into leaves.
//!
//! Tensors are cheap `Rc` handles; parameters are leaves whose data the
//! optimizer updates in place between steps. Shapes are row-major and all
//! ops are defined on rank ≤ 2, with row-wise ops (softmax, layer norm)
//! acting on the last axis.

mod check;
mod loss;
mod ops;
mod optim;

pub use check::{grad_check, grad_check_coords};
pub use loss::{bce_logits, cross_entropy};
pub use optim::{Adam, AdamConfig, AdamState};

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use thiserror::Error;

use ops::Op;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch { op: &'static str, left: Vec<usize>, right: Vec<usize> },
    #[error("every target is the ignore id")]
    AllIgnored,
    #[error("index {index} out of range for {op} with bound {bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
}

pub type Result<T> = std::result::Result<T, TensorError>;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static NO_GRAD_DEPTH: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

fn grad_enabled() -> bool {
    NO_GRAD_DEPTH.with(|d| d.get() == 0)
}

/// Runs `f` without recording any ops.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    struct Guard;
    impl Drop for Guard {
        fn drop(&mut self) {
            NO_GRAD_DEPTH.with(|d| d.set(d.get() - 1));
        }
    }
    NO_GRAD_DEPTH.with(|d| d.set(d.get() + 1));
    let _guard = Guard;
    f()
}

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    op: Op,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .field("data", &*self.0.data.borrow())
            .finish()
    }
}

impl Tensor {
    fn from_op(shape: Vec<usize>, data: Vec<f64>, op: Op) -> Tensor {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        let requires_grad = grad_enabled() && op.parents().iter().any(|p| p.requires_grad());
        let op = if requires_grad { op } else { Op::Leaf };
        Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op,
        }))
    }

    fn leaf(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::ShapeMismatch { op: "from_vec", left: shape, right: vec![data.len()] });
        }
        Ok(Tensor(Rc::new(Node {
            id: next_id(),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            op: Op::Leaf,
        })))
    }

    /// A constant (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, false)
    }

    /// A trainable leaf.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        Self::leaf(shape.to_vec(), data, true)
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(vec![], vec![v], false).expect("scalar shape")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Self::leaf(shape.to_vec(), vec![0.0; n], false).expect("consistent shape")
    }

    pub fn eye(n: usize) -> Tensor {
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            d[i * n + i] = 1.0;
        }
        Self::leaf(vec![n, n], d, false).expect("consistent shape")
    }

    /// Normal(0, std²) entries.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Tensor {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * standard_normal(rng)).collect();
        Self::leaf(shape.to_vec(), data, false).expect("consistent shape")
    }

    /// The same values as a gradient-free constant.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.borrow().clone(), false).expect("same shape")
    }

    /// A fresh trainable leaf with the same values.
    pub fn to_param(&self) -> Tensor {
        Self::leaf(self.0.shape.clone(), self.0.data.borrow().clone(), true).expect("same shape")
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.shape.iter().product()
    }

    pub fn rows(&self) -> usize {
        match self.0.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.numel() / self.cols(),
        }
    }

    pub fn cols(&self) -> usize {
        *self.0.shape.last().unwrap_or(&1)
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access for optimizers and finite-difference checks.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        self.0.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn same_node(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    /// Backpropagates from a scalar, accumulating into leaf `grad`s.
    pub fn backward(&self) {
        assert_eq!(self.numel(), 1, "backward starts from a scalar");
        if !self.requires_grad() {
            return;
        }
        // collect the graph
        let mut nodes: Vec<Tensor> = Vec::new();
        let mut seen: HashMap<u64, ()> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if seen.insert(t.0.id, ()).is_some() {
                continue;
            }
            for p in t.0.op.parents() {
                if p.requires_grad() && !seen.contains_key(&p.0.id) {
                    stack.push(p.clone());
                }
            }
            nodes.push(t);
        }
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.0.id, vec![1.0]);
        for node in nodes {
            let g = grads.remove(&node.0.id).unwrap_or_else(|| vec![0.0; node.numel()]);
            if let Op::Leaf = node.0.op {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
                continue;
            }
            for (parent, contribution) in ops::backward(&node, &g) {
                if !parent.requires_grad() {
                    continue;
                }
                match grads.get_mut(&parent.0.id) {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, b)| *a += b),
                    None => {
                        grads.insert(parent.0.id, contribution);
                    }
                }
            }
        }
    }
}

pub(crate) fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests;
