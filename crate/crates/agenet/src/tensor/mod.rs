//! Dense n-dimensional tensors with reverse-mode automatic differentiation.
//!
//! Every forward operation that participates in differentiation records a
//! node on its output: the list of parent tensors plus a backward rule.
//! `Tensor::backward` walks the recorded graph in reverse topological order
//! and accumulates gradients into every tracked tensor. Leaves created with
//! `requires_grad(true)` end up with populated `grad` buffers.

pub mod ops;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

/// Runs `f` with gradient recording disabled (evaluation / finite differences).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

fn next_id() -> u64 {
    NEXT_ID.with(|n| {
        let id = n.get();
        n.set(id + 1);
        id
    })
}

/// Backward rule: receives the output gradient and the parent tensors in the
/// order they were recorded, and accumulates into each parent's grad.
type BackwardFn<S> = Box<dyn Fn(&[S], &[Tensor<S>])>;

struct Node<S: Scalar> {
    parents: Vec<Tensor<S>>,
    backward: BackwardFn<S>,
}

struct Inner<S: Scalar> {
    id: u64,
    dims: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    requires_grad: Cell<bool>,
    node: RefCell<Option<Node<S>>>,
}

/// Shared handle to a tensor. Clones are cheap and alias the same storage.
pub struct Tensor<S: Scalar>(Rc<Inner<S>>);

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(dims: &[usize], data: Vec<S>) -> Result<Tensor<S>> {
        let numel: usize = dims.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {:?} imply {} elements, got {}", dims, numel, data.len()),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized axis in {:?}", dims)));
        }
        Ok(Tensor(Rc::new(Inner {
            id: next_id(),
            dims: dims.to_vec(),
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            node: RefCell::new(None),
        })))
    }

    pub fn zeros(dims: &[usize]) -> Tensor<S> {
        let numel = dims.iter().product();
        Tensor::from_vec(dims, vec![S::zero(); numel]).expect("zeros: valid dims")
    }

    pub fn full(dims: &[usize], value: S) -> Tensor<S> {
        let numel = dims.iter().product();
        Tensor::from_vec(dims, vec![value; numel]).expect("full: valid dims")
    }

    pub fn scalar(value: S) -> Tensor<S> {
        Tensor::from_vec(&[1], vec![value]).unwrap()
    }

    pub(crate) fn from_op(dims: Vec<usize>, data: Vec<S>, parents: Vec<Tensor<S>>, backward: BackwardFn<S>) -> Tensor<S> {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        let track = grad_enabled() && parents.iter().any(|p| p.tracked());
        let t = Tensor(Rc::new(Inner {
            id: next_id(),
            dims,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad: Cell::new(false),
            node: RefCell::new(None),
        }));
        if track {
            *t.0.node.borrow_mut() = Some(Node { parents, backward });
        }
        t
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn dims(&self) -> &[usize] {
        &self.0.dims
    }

    pub fn numel(&self) -> usize {
        self.0.dims.iter().product()
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.0.data.borrow()
    }

    /// Direct mutable access to the buffer (optimizer updates, finite differences).
    pub fn data_mut(&self) -> RefMut<'_, Vec<S>> {
        self.0.data.borrow_mut()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data().iter().map(|v| v.as_f64()).collect()
    }

    pub fn set_requires_grad(&self, flag: bool) -> &Self {
        self.0.requires_grad.set(flag);
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad.get()
    }

    /// A tensor participates in backward if it is a grad leaf or was produced
    /// by a recorded operation.
    pub fn tracked(&self) -> bool {
        self.requires_grad() || self.0.node.borrow().is_some()
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.0.grad.borrow_mut() = None;
    }

    /// Adds `g` into this tensor's gradient buffer if it is tracked.
    pub(crate) fn accum_grad(&self, g: &[S]) {
        if !self.tracked() {
            return;
        }
        debug_assert_eq!(g.len(), self.numel());
        let mut slot = self.0.grad.borrow_mut();
        match slot.as_mut() {
            Some(buf) => {
                for (b, &x) in buf.iter_mut().zip(g) {
                    *b += x;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// New leaf with a copy of this tensor's values and no graph history.
    pub fn detach(&self) -> Tensor<S> {
        Tensor::from_vec(self.dims(), self.data().clone()).unwrap()
    }

    /// Errors if any stored value is NaN or infinite.
    pub fn assert_finite(&self, label: &str) -> Result<()> {
        if let Some(pos) = self.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite value at flat index {} of tensor '{}'",
                pos, label
            )));
        }
        Ok(())
    }

    /// Reverse-mode gradient accumulation from a scalar loss. Repeated calls
    /// without `zero_grad` accumulate into existing gradients.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar loss, got dims {:?}",
                self.dims()
            )));
        }
        // Iterative post-order DFS over parent edges: children appear after
        // all of their parents, so reversing gives reverse-topological order.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.id());
        while let Some((t, child_idx)) = stack.pop() {
            let parent = {
                let node = t.0.node.borrow();
                node.as_ref().and_then(|n| n.parents.get(child_idx).cloned())
            };
            match parent {
                Some(p) => {
                    stack.push((t, child_idx + 1));
                    if p.tracked() && visited.insert(p.id()) {
                        stack.push((p, 0));
                    }
                }
                None => order.push(t),
            }
        }
        self.accum_grad(&[S::one()]);
        for t in order.iter().rev() {
            let node = t.0.node.borrow();
            if let Some(node) = node.as_ref() {
                let g = match t.0.grad.borrow().clone() {
                    Some(g) => g,
                    None => continue, // no gradient reached this tensor
                };
                (node.backward)(&g, &node.parents);
            }
        }
        Ok(())
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("dims", &self.0.dims)
            .field("requires_grad", &self.requires_grad())
            .finish()
    }
}
