//! Dense `f64` tensors with a reverse-mode autodiff graph.
//!
//! A [`Tensor`] is a cheap reference-counted handle. Operations on tensors
//! that require gradients record a backward closure together with handles to
//! their parents; [`Tensor::backward`] walks that graph once in reverse
//! topological order. Graphs are single-threaded (`Rc`), so independent runs
//! build independent graphs.
//!
//! Leaf gradients accumulate across `backward` calls until
//! [`Tensor::zero_grad`]. Interior nodes are overwritten with the gradient of
//! the most recent `backward` so they can be inspected.

mod gemm;
pub mod gradcheck;
mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

use crate::error::{contract, Error, Result};

pub use gradcheck::{check_gradients, finite_diff_grad, GradCheckConfig, GradCheckReport};

type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>>>;

struct GradFn {
    op: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn>,
}

#[derive(Clone)]
pub struct Tensor(Rc<Node>);

thread_local! {
    static NO_GRAD: Cell<bool> = const { Cell::new(false) };
}

/// Disables graph recording on this thread while alive.
pub struct NoGradGuard {
    prev: bool,
}

impl NoGradGuard {
    pub fn new() -> Self {
        let prev = NO_GRAD.with(|c| c.replace(true));
        NoGradGuard { prev }
    }
}

impl Default for NoGradGuard {
    fn default() -> Self {
        Self::new()
    }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        NO_GRAD.with(|c| c.set(self.prev));
    }
}

pub fn is_grad_enabled() -> bool {
    !NO_GRAD.with(|c| c.get())
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn from_node(node: Node) -> Tensor {
        Tensor(Rc::new(node))
    }

    /// Constant tensor (never receives gradients).
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "new",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Self::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf.
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        let t = Tensor::new(data, shape)?;
        Ok(Self::leaf(t.to_vec(), shape.to_vec(), true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::leaf(vec![v], Vec::new(), false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::leaf(vec![0.0; numel(shape)], shape.to_vec(), false)
    }

    pub fn full(shape: &[usize], v: f64) -> Tensor {
        Self::leaf(vec![v; numel(shape)], shape.to_vec(), false)
    }

    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor::from_node(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            grad_fn: None,
        })
    }

    /// Builds the result of an operation. A graph edge is only recorded when
    /// some parent needs a gradient and recording is enabled.
    pub(crate) fn from_op(
        data: Vec<f64>,
        shape: Vec<usize>,
        op: &'static str,
        parents: Vec<Tensor>,
        backward: impl Fn(&[f64]) -> Vec<Option<Vec<f64>>> + 'static,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len(), "{op}");
        let track = is_grad_enabled() && parents.iter().any(Tensor::requires_grad);
        if !track {
            return Self::leaf(data, shape, false);
        }
        Tensor::from_node(Node {
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: true,
            grad_fn: Some(GradFn {
                op,
                parents,
                backward: Box::new(backward),
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn ndim(&self) -> usize {
        self.0.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.0.data.borrow()
    }

    /// Mutable access to the values, used by optimizers and finite
    /// differences. Mutating a tensor that a live graph saved for its
    /// backward pass invalidates that graph.
    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.0.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.0.shape);
        d[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.0.grad_fn.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.grad_fn.as_ref().map(|g| g.op)
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.0.grad.borrow().clone()
    }

    pub fn grad_ref(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.0.grad.borrow()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.0, &other.0)
    }

    fn key(&self) -> usize {
        Rc::as_ptr(&self.0) as usize
    }

    /// Value copy with no backward edge.
    pub fn detach(&self) -> Tensor {
        Self::leaf(self.to_vec(), self.0.shape.clone(), false)
    }

    /// Populates gradients of every reachable `requires_grad` tensor.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return contract(format!(
                "backward() needs a scalar root, got shape {:?}",
                self.shape()
            ));
        }
        if !self.requires_grad() {
            return Ok(());
        }
        let order = self.topo_order();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; order.len()];
        let index: std::collections::HashMap<usize, usize> =
            order.iter().enumerate().map(|(i, t)| (t.key(), i)).collect();
        grads[order.len() - 1] = Some(vec![1.0]);

        for pos in (0..order.len()).rev() {
            let node = &order[pos];
            let Some(g) = grads[pos].take() else { continue };
            if let Some(gf) = &node.0.grad_fn {
                let parent_grads = (gf.backward)(&g);
                debug_assert_eq!(parent_grads.len(), gf.parents.len(), "{}", gf.op);
                for (parent, pg) in gf.parents.iter().zip(parent_grads) {
                    let Some(pg) = pg else { continue };
                    if !parent.requires_grad() {
                        continue;
                    }
                    let pi = index[&parent.key()];
                    match &mut grads[pi] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                        slot @ None => *slot = Some(pg),
                    }
                }
                *node.0.grad.borrow_mut() = Some(g);
            } else {
                let mut slot = node.0.grad.borrow_mut();
                match slot.as_mut() {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self` that require grad, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        // iterative post-order DFS; deep graphs would overflow a recursive walk
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.key()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(gf) = &t.0.grad_fn {
                for p in &gf.parents {
                    if p.requires_grad() && !visited.contains(&p.key()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.data();
        let preview: Vec<f64> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.requires_grad())
            .field("op", &self.op_name())
            .field("data", &preview)
            .finish()
    }
}
