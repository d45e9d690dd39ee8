//! Minimal reverse-mode differentiable tensor core.
//!
//! The op set is exactly what the three network families need: 3D convolution
//! and transpose convolution, instance normalization, pointwise activations,
//! dropout, 2x resampling, concatenation, and the loss reductions. There is
//! no general autodiff beyond these ops.
//!
//! Tensors are reference-counted nodes in a define-by-run graph. Calling
//! [`Tensor::backward`] on a scalar loss walks the recorded graph in reverse
//! creation order (a valid topological order, since ops always build outputs
//! after their inputs) and accumulates gradients into every tracked tensor.
//!
//! Training runs at `f32`; the finite-difference gradient checks instantiate
//! the same ops at `f64`.

mod adam;
mod ckpt;
pub mod gradcheck;
mod ops;

pub use adam::{Adam, AdamHyper, AdamState};
pub use ckpt::{load_checkpoint, save_checkpoint, CkptHeader, CkptTensorMeta};
pub use ops::*;

use std::cell::{Cell, RefCell};
use std::collections::HashSet;
use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, SubAssign};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use num_traits::Float;

use crate::memory::{track_alloc, track_free, TrackClass};

/// Scalar element type of the tensor core.
pub trait Scalar:
    Float + AddAssign + SubAssign + Sum + Send + Sync + fmt::Debug + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` without recording the computation graph. Intermediate tensors
/// are freed as they go out of scope, which is what keeps inference memory
/// at a patch-sized constant.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) type BackwardFn<T> = Box<dyn Fn(&Node<T>)>;

pub(crate) struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    pub(crate) data: RefCell<Vec<T>>,
    pub(crate) grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    parents: Vec<Tensor<T>>,
    backward: Option<BackwardFn<T>>,
}

impl<T: Scalar> Node<T> {
    /// Adds a contribution into this node's gradient buffer, allocating zeros
    /// on first touch.
    pub(crate) fn accum_grad(&self, f: impl FnOnce(&mut [T])) {
        let mut slot = self.grad.borrow_mut();
        if slot.is_none() {
            let n = self.data.borrow().len();
            track_alloc(TrackClass::Tensor, n * std::mem::size_of::<T>());
            *slot = Some(vec![T::zero(); n]);
        }
        f(slot.as_mut().unwrap());
    }
}

impl<T: Scalar> Drop for Node<T> {
    fn drop(&mut self) {
        let elem = std::mem::size_of::<T>();
        track_free(TrackClass::Tensor, self.data.borrow().len() * elem);
        if let Some(g) = self.grad.borrow().as_ref() {
            track_free(TrackClass::Tensor, g.len() * elem);
        }
    }
}

/// An N-dimensional value array with an optional gradient, up to 5 axes
/// `(batch, channel, z, y, x)`. Cloning is cheap (shared node).
pub struct Tensor<T: Scalar>(pub(crate) Rc<Node<T>>);

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor(Rc::clone(&self.0))
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl<T: Scalar> Tensor<T> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        parents: Vec<Tensor<T>>,
        backward: Option<BackwardFn<T>>,
    ) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(data.len(), n, "data length does not match shape {shape:?}");
        assert!(shape.len() <= 5, "tensors have at most 5 axes");
        track_alloc(TrackClass::Tensor, n * std::mem::size_of::<T>());
        Tensor(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data: RefCell::new(data),
            grad: RefCell::new(None),
            requires_grad,
            parents,
            backward,
        }))
    }

    /// A leaf tensor that does not require gradients (network inputs).
    pub fn input(shape: &[usize], data: Vec<T>) -> Self {
        Self::new_node(shape.to_vec(), data, false, Vec::new(), None)
    }

    /// A trainable leaf tensor.
    pub fn param(shape: &[usize], data: Vec<T>) -> Self {
        Self::new_node(shape.to_vec(), data, true, Vec::new(), None)
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::input(shape, vec![T::zero(); shape.iter().product()])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: BackwardFn<T>,
    ) -> Self {
        if grad_enabled() && parents.iter().any(|p| p.tracked()) {
            Self::new_node(shape, data, false, parents, Some(backward))
        } else {
            Self::new_node(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn len(&self) -> usize {
        self.0.data.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// True if gradients must flow through this tensor.
    pub(crate) fn tracked(&self) -> bool {
        self.0.requires_grad || self.0.backward.is_some()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.0.data.borrow().clone()
    }

    /// The single element of a scalar tensor.
    pub fn item(&self) -> T {
        let d = self.0.data.borrow();
        assert_eq!(d.len(), 1, "item() on non-scalar tensor");
        d[0]
    }

    pub fn grad_to_vec(&self) -> Option<Vec<T>> {
        self.0.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        let mut slot = self.0.grad.borrow_mut();
        if let Some(g) = slot.take() {
            track_free(TrackClass::Tensor, g.len() * std::mem::size_of::<T>());
        }
    }

    /// Overwrites the values of a leaf tensor (optimizer updates, gradient
    /// checks). Panics on graph tensors.
    pub fn set_data(&self, data: Vec<T>) {
        assert!(self.0.backward.is_none(), "set_data on a graph tensor");
        assert_eq!(data.len(), self.len());
        *self.0.data.borrow_mut() = data;
    }

    pub(crate) fn with_data<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        f(&self.0.data.borrow())
    }

    pub(crate) fn with_data_mut<R>(&self, f: impl FnOnce(&mut [T]) -> R) -> R {
        f(&mut self.0.data.borrow_mut())
    }

    /// A new leaf tensor sharing no graph history with this one.
    pub fn detach(&self) -> Tensor<T> {
        Tensor::input(&self.0.shape, self.to_vec())
    }

    /// Reverse-mode pass from a scalar loss. Every tracked tensor reachable
    /// through the graph receives a populated gradient.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() needs a scalar loss");
        // Collect the reachable subgraph.
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        let mut nodes = Vec::new();
        while let Some(t) = stack.pop() {
            if !seen.insert(t.0.id) {
                continue;
            }
            for p in &t.0.parents {
                stack.push(p.clone());
            }
            nodes.push(t);
        }
        // Reverse creation order is a topological order: ops always create
        // outputs after their inputs exist.
        nodes.sort_by(|a, b| b.0.id.cmp(&a.0.id));
        self.0.accum_grad(|g| g[0] = T::one());
        for node in &nodes {
            if let Some(bk) = &node.0.backward {
                if node.0.grad.borrow().is_some() {
                    bk(&node.0);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_populates_all_reachable_grads() {
        let a = Tensor::<f64>::param(&[4], vec![1.0, -2.0, 3.0, 0.5]);
        let b = Tensor::<f64>::param(&[4], vec![0.5, 0.5, 0.5, 0.5]);
        let y = add(&a, &b);
        let loss = mean_all(&y);
        loss.backward();
        let ga = a.grad_to_vec().expect("a grad");
        let gb = b.grad_to_vec().expect("b grad");
        for g in ga.iter().chain(&gb) {
            assert!((g - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn no_grad_suppresses_graph_recording() {
        let a = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        let y = no_grad(|| tanh(&a));
        assert!(y.0.backward.is_none());
        assert!(y.0.parents.is_empty());
    }

    #[test]
    fn shared_input_accumulates_both_paths() {
        let a = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        let y = add(&a, &a);
        let loss = mean_all(&y);
        loss.backward();
        let g = a.grad_to_vec().unwrap();
        for v in g {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let a = Tensor::<f64>::param(&[2], vec![1.0, 2.0]);
        let d = a.detach();
        let loss = mean_all(&d);
        loss.backward();
        assert!(a.grad_to_vec().is_none());
    }
}
