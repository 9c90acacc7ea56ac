//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] owns an append-only list of nodes; each [`Tensor`] is an index
//! into one tape plus a shared handle on its value. Node ids grow in program
//! order, so the backward sweep is a single reverse iteration: by the time a
//! node is visited every downstream contribution to its gradient has already
//! been accumulated. One tape serves one forward/backward pass; build a fresh
//! tape per training step.
//!
//! Values are immutable once created. `detach` and constant staging reuse the
//! same value allocation, they only drop the gradient edge.

pub mod conv;
pub mod gradcheck;
pub mod ops;
pub mod roi;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Receives gradient contributions during the backward sweep.
pub struct GradSink<'a, T: Scalar> {
    grads: &'a mut [Option<ArrayD<T>>],
}

impl<'a, T: Scalar> GradSink<'a, T> {
    /// Accumulates `g` into the gradient slot of node `id`.
    pub fn add(&mut self, id: usize, g: ArrayD<T>) {
        match &mut self.grads[id] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), g.shape(), "gradient shape drift");
                *acc += &g;
            }
            slot @ None => *slot = Some(g),
        }
    }
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&ArrayD<T>, &mut GradSink<'_, T>)>;

struct Node<T: Scalar> {
    backward: Option<BackwardFn<T>>,
}

struct TapeInner<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<ArrayD<T>>>,
    /// Param leaves staged this pass, in staging order.
    param_nodes: Vec<(u64, ParamId, usize)>,
}

/// Shared, growable record of one differentiable computation.
pub struct Tape<T: Scalar> {
    inner: Rc<RefCell<TapeInner<T>>>,
}

impl<T: Scalar> Clone for Tape<T> {
    fn clone(&self) -> Self {
        Self {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            inner: Rc::new(RefCell::new(TapeInner {
                nodes: Vec::new(),
                grads: Vec::new(),
                param_nodes: Vec::new(),
            })),
        }
    }

    fn push(&self, backward: Option<BackwardFn<T>>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { backward });
        inner.nodes.len() - 1
    }

    pub(crate) fn make_tensor(
        &self,
        value: Rc<ArrayD<T>>,
        requires_grad: bool,
        backward: Option<BackwardFn<T>>,
    ) -> Tensor<T> {
        debug_assert!(backward.is_none() || requires_grad);
        let id = self.push(backward);
        Tensor {
            tape: self.clone(),
            id,
            value,
            requires_grad,
        }
    }

    /// Stages a value that never receives a gradient.
    pub fn constant(&self, value: ArrayD<T>) -> Tensor<T> {
        self.make_tensor(Rc::new(value), false, None)
    }

    /// Stages a differentiable leaf (no producer, gradient on request).
    pub fn leaf(&self, value: ArrayD<T>) -> Tensor<T> {
        self.make_tensor(Rc::new(value), true, None)
    }

    /// Stages a parameter as a differentiable leaf and records the mapping so
    /// [`Tape::param_grads`] can hand its gradient back to the optimizer.
    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Tensor<T> {
        let t = self.leaf(store.get(id).clone());
        self.inner
            .borrow_mut()
            .param_nodes
            .push((store.uid(), id, t.id));
        t
    }

    /// Runs the backward sweep from `loss`, which must be a single-element
    /// tensor. Gradients of every reachable node are retained until the next
    /// `backward` call on this tape.
    pub fn backward(&self, loss: &Tensor<T>) {
        assert_eq!(
            loss.value.len(),
            1,
            "backward expects a scalar loss, got shape {:?}",
            loss.value.shape()
        );
        let mut inner = self.inner.borrow_mut();
        let n = inner.nodes.len();
        inner.grads = vec![None; n];
        inner.grads[loss.id] = Some(ArrayD::from_elem(loss.value.raw_dim(), T::one()));
        let TapeInner { nodes, grads, .. } = &mut *inner;
        for id in (0..=loss.id).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(f) = &nodes[id].backward {
                let g = grads[id].clone().unwrap();
                f(&g, &mut GradSink { grads });
            }
        }
    }

    /// Gradient of an arbitrary tensor from the last backward sweep.
    pub fn grad(&self, t: &Tensor<T>) -> Option<ArrayD<T>> {
        self.inner.borrow().grads.get(t.id).cloned().flatten()
    }

    /// Per-parameter gradients from the last backward sweep, indexed like the
    /// store. A parameter staged more than once gets its leaf gradients
    /// summed; an unreached parameter stays `None`. Only stagings from this
    /// exact store count, so several stores can share one tape.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Option<ArrayD<T>>> {
        let inner = self.inner.borrow();
        let mut out: Vec<Option<ArrayD<T>>> = vec![None; store.len()];
        for &(uid, pid, node) in &inner.param_nodes {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = inner.grads.get(node).and_then(|g| g.as_ref()) {
                match &mut out[pid.index()] {
                    Some(acc) => *acc += g,
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Handle on one tape node: shared value plus gradient bookkeeping.
pub struct Tensor<T: Scalar> {
    tape: Tape<T>,
    id: usize,
    value: Rc<ArrayD<T>>,
    requires_grad: bool,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            tape: self.tape.clone(),
            id: self.id,
            value: Rc::clone(&self.value),
            requires_grad: self.requires_grad,
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn tape(&self) -> &Tape<T> {
        &self.tape
    }

    pub fn value(&self) -> &ArrayD<T> {
        &self.value
    }

    pub(crate) fn value_rc(&self) -> Rc<ArrayD<T>> {
        Rc::clone(&self.value)
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Reads a single-element tensor.
    pub fn scalar(&self) -> T {
        assert_eq!(self.value.len(), 1, "scalar() on shape {:?}", self.shape());
        *self.value.iter().next().unwrap()
    }

    /// Same value, no gradient edge.
    pub fn detach(&self) -> Tensor<T> {
        self.tape.make_tensor(Rc::clone(&self.value), false, None)
    }

    /// Gradient from the last backward sweep, if any reached this node.
    pub fn grad(&self) -> Option<ArrayD<T>> {
        self.tape.grad(self)
    }

    pub(crate) fn id(&self) -> usize {
        self.id
    }

    pub(crate) fn same_tape(&self, other: &Tensor<T>) -> bool {
        Rc::ptr_eq(&self.tape.inner, &other.tape.inner)
    }
}

/// Scalar-shape helper used by loss builders.
pub fn scalar_shape() -> IxDyn {
    IxDyn(&[1])
}
