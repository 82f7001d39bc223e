//! Dense tensors with tape-free reverse-mode differentiation.
//!
//! Every operation that touches a tensor with `requires_grad` set records a
//! backward closure holding handles to its inputs. Calling
//! [`Tensor::backward`] on a scalar walks that lineage in reverse
//! topological order and accumulates gradients into the leaves. Interior
//! nodes release their gradient buffers and lineage as soon as they have
//! been propagated, so a graph is consumed by one backward pass.

mod batchnorm;
mod conv;
mod ops;
mod softmax;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;

pub use batchnorm::{BatchNorm, Mode};
pub use ops::{concat_channels, ewise, EwiseOp};
pub use softmax::SoftmaxAxis;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static GRAD_DISABLED: Cell<usize> = const { Cell::new(0) };
}

/// Disables lineage recording on this thread until the guard is dropped.
#[must_use = "recording resumes as soon as the guard is dropped"]
pub struct NoGradGuard {
    _private: (),
}

pub fn no_grad() -> NoGradGuard {
    GRAD_DISABLED.with(|c| c.set(c.get() + 1));
    NoGradGuard { _private: () }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        GRAD_DISABLED.with(|c| c.set(c.get() - 1));
    }
}

fn grad_enabled() -> bool {
    GRAD_DISABLED.with(|c| c.get() == 0)
}

/// Backward rule of one recorded operation.
pub(crate) trait GradFn<T: Scalar> {
    fn inputs(&self) -> Vec<&Tensor<T>>;

    /// Accumulates input gradients given the forward output and its gradient.
    fn backward(&self, output: &[T], grad_output: &[T]);
}

struct Node<T: Scalar> {
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: RefCell<Option<Box<dyn GradFn<T>>>>,
}

/// Shared handle to an N-dimensional array.
///
/// Cloning a `Tensor` clones the handle, not the buffer; parameters are
/// held by their owning layer and by whoever else needs to read or update
/// them.
pub struct Tensor<T: Scalar = f32> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Self {
            node: Rc::clone(&self.node),
        }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let preview: Vec<T> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("data", &preview)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn build(shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            node: Rc::new(Node {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn: RefCell::new(None),
            }),
        }
    }

    /// A constant tensor. Fails when `data` does not fill `shape`.
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self::build(shape.to_vec(), data, false))
    }

    /// A learnable leaf tensor.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::new(shape, data)?;
        Ok(Self::build(t.node.shape.clone(), t.into_vec(), true))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self::build(shape.to_vec(), vec![value; n], false)
    }

    pub fn scalar(value: T) -> Self {
        Self::build(Vec::new(), vec![value], false)
    }

    /// Result of an operation; records `grad_fn` when any input needs gradients.
    pub(crate) fn from_op(shape: Vec<usize>, data: Vec<T>, grad_fn: impl GradFn<T> + 'static) -> Self {
        let requires_grad = grad_enabled() && grad_fn.inputs().iter().any(|t| t.requires_grad());
        let out = Self::build(shape, data, requires_grad);
        if requires_grad {
            *out.node.grad_fn.borrow_mut() = Some(Box::new(grad_fn));
        }
        out
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn ndim(&self) -> usize {
        self.node.shape.len()
    }

    pub fn len(&self) -> usize {
        self.node.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// True when no operation produced this tensor (parameters and inputs).
    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.borrow().is_none()
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    /// Mutable access to the values, used by optimizers and initializers.
    ///
    /// Writing to a tensor that some live graph depends on changes what a
    /// later backward pass sees; update parameters only between steps.
    pub fn data_mut(&self) -> RefMut<'_, Vec<T>> {
        self.node.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    fn into_vec(self) -> Vec<T> {
        match Rc::try_unwrap(self.node) {
            Ok(node) => node.data.into_inner(),
            Err(node) => node.data.borrow().clone(),
        }
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        let data = self.data();
        if data.len() != 1 {
            return Err(Error::shape("item", format!("tensor has {} elements", data.len())));
        }
        Ok(data[0])
    }

    pub fn grad(&self) -> Option<Ref<'_, Vec<T>>> {
        Ref::filter_map(self.node.grad.borrow(), |g| g.as_ref()).ok()
    }

    pub fn grad_vec(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Same values, no lineage, no gradient tracking.
    pub fn detach(&self) -> Self {
        Self::build(self.node.shape.clone(), self.to_vec(), false)
    }

    pub(crate) fn accumulate_grad(&self, delta: &[T]) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (g, d) in g.iter_mut().zip(delta) {
                    *g = *g + *d;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Like [`accumulate_grad`](Self::accumulate_grad) but lets the caller
    /// write into the buffer directly, allocating a zeroed one on first use.
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [T])) {
        if !self.requires_grad() {
            return;
        }
        let mut slot = self.node.grad.borrow_mut();
        let len = self.len();
        let g = slot.get_or_insert_with(|| vec![T::zero(); len]);
        f(g);
    }

    /// Populates `grad` of every reachable tensor that requires it with
    /// ∂self/∂tensor. `self` must hold a single element.
    pub fn backward(&self) -> Result<()> {
        if self.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }
        if !self.requires_grad() {
            return Err(Error::invalid("backward", "loss is not connected to any parameter"));
        }

        let order = self.topological_order();
        self.accumulate_grad(&[T::one()]);
        for node in order.iter().rev() {
            let grad_fn = node.node.grad_fn.borrow_mut().take();
            let Some(grad_fn) = grad_fn else { continue };
            let grad = node.node.grad.borrow_mut().take();
            if let Some(grad) = grad {
                let data = node.node.data.borrow();
                grad_fn.backward(&data, &grad);
            }
        }
        Ok(())
    }

    /// Nodes reachable from `self`, inputs before outputs.
    fn topological_order(&self) -> Vec<Tensor<T>> {
        let mut visited: HashSet<*const Node<T>> = HashSet::new();
        let mut order = Vec::new();
        // (tensor, children already pushed)
        let mut stack: Vec<(Tensor<T>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(Rc::as_ptr(&t.node)) {
                continue;
            }
            let inputs: Vec<Tensor<T>> = match t.node.grad_fn.borrow().as_ref() {
                Some(f) => f.inputs().into_iter().filter(|i| i.requires_grad()).cloned().collect(),
                None => Vec::new(),
            };
            stack.push((t, true));
            for input in inputs {
                if !visited.contains(&Rc::as_ptr(&input.node)) {
                    stack.push((input, false));
                }
            }
        }
        order
    }
}

/// Elements per sample of a batch-major shape.
pub(crate) fn sample_len(shape: &[usize]) -> usize {
    shape.iter().skip(1).product()
}
