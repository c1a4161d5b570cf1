use std::cell::{Cell, Ref, RefCell};
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` without recording any operations on the gradient tape.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Vector-Jacobian product of one recorded operation. Receives the gradient of
/// the operation's output and a flag per parent telling whether that parent
/// needs a gradient; returns one optional gradient per parent.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>>>;

struct GradFn<T: Scalar> {
    name: &'static str,
    parents: Vec<Tensor<T>>,
    backward: BackwardFn<T>,
}

struct Node<T: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<T>>,
    grad: RefCell<Option<Vec<T>>>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Dense row-major tensor participating in reverse-mode differentiation.
///
/// Cloning is cheap and shares storage. Data is immutable once an operation
/// has produced it; only leaves may be updated in place (by optimizers).
pub struct Tensor<T: Scalar = f64> {
    node: Rc<Node<T>>,
}

impl<T: Scalar> Clone for Tensor<T> {
    fn clone(&self) -> Self {
        Tensor { node: Rc::clone(&self.node) }
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let data = self.node.data.borrow();
        let preview: Vec<T> = data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.node.shape)
            .field("requires_grad", &self.node.requires_grad)
            .field("op", &self.node.grad_fn.as_ref().map(|g| g.name))
            .field("data", &preview)
            .finish()
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<T>,
        requires_grad: bool,
        grad_fn: Option<GradFn<T>>,
    ) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                grad_fn,
            }),
        }
    }

    /// Builds a constant (non-differentiable) tensor.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::shape(
                "from_vec",
                format!("shape {:?} holds {} elements, got {}", shape, numel(shape), data.len()),
            ));
        }
        Ok(Self::new_node(shape.to_vec(), data, false, None))
    }

    /// Builds a trainable leaf.
    pub fn parameter(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let t = Self::from_vec(shape, data)?;
        Ok(t.into_leaf(true))
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::from_f64_lossy(v)).collect())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_node(shape.to_vec(), vec![T::zero(); numel(shape)], false, None)
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self::new_node(shape.to_vec(), vec![value; numel(shape)], false, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::new_node(vec![1], vec![value], false, None)
    }

    /// Fresh leaf sharing no history with `self`.
    pub fn detach(&self) -> Self {
        Self::new_node(self.shape().to_vec(), self.to_vec(), false, None)
    }

    fn into_leaf(self, requires_grad: bool) -> Self {
        match Rc::try_unwrap(self.node) {
            Ok(node) => Self::new_node(node.shape, node.data.into_inner(), requires_grad, None),
            Err(rc) => {
                let t = Tensor { node: rc };
                Self::new_node(t.shape().to_vec(), t.to_vec(), requires_grad, None)
            }
        }
    }

    /// Same values as a leaf that records gradients.
    pub fn requires_grad_leaf(&self) -> Self {
        Self::new_node(self.shape().to_vec(), self.to_vec(), true, None)
    }

    pub fn id(&self) -> u64 {
        self.node.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn rank(&self) -> usize {
        self.node.shape.len()
    }

    pub fn numel(&self) -> usize {
        numel(&self.node.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.node.grad_fn.is_none()
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.node.grad_fn.as_ref().map(|g| g.name)
    }

    pub fn data(&self) -> Ref<'_, Vec<T>> {
        self.node.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<T> {
        self.node.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.node.data.borrow().iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> T {
        self.node.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<T>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Mutates the values of a leaf in place. Fails on non-leaves, whose values
    /// are owned by the graph that produced them.
    pub fn update_data(&self, f: impl FnOnce(&mut [T])) -> Result<()> {
        if !self.is_leaf() {
            return Err(TensorError::Contract("only leaf tensors can be updated in place".into()));
        }
        f(&mut self.node.data.borrow_mut());
        Ok(())
    }

    /// Replaces the values of a leaf with `values` (same element count).
    pub fn assign(&self, values: &[T]) -> Result<()> {
        if values.len() != self.numel() {
            return Err(TensorError::shape(
                "assign",
                format!("expected {} values, got {}", self.numel(), values.len()),
            ));
        }
        self.update_data(|d| d.copy_from_slice(values))
    }

    /// Records the result of an operation. Non-finite outputs are rejected.
    pub(crate) fn from_op(
        name: &'static str,
        shape: Vec<usize>,
        data: Vec<T>,
        parents: Vec<Tensor<T>>,
        backward: impl Fn(&[T], &[bool]) -> Vec<Option<Vec<T>>> + 'static,
    ) -> Result<Self> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: name });
        }
        let track = grad_enabled() && parents.iter().any(|p| p.requires_grad());
        if !track {
            return Ok(Self::new_node(shape, data, false, None));
        }
        Ok(Self::new_node(
            shape,
            data,
            true,
            Some(GradFn { name, parents, backward: Box::new(backward) }),
        ))
    }

    /// Reverse-mode sweep from a one-element tensor. Leaf gradients accumulate
    /// additively across calls; use [`Tensor::zero_grad`] to reset.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let mut order: Vec<Tensor<T>> = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if !seen.insert(t.id()) {
                continue;
            }
            if let Some(g) = &t.node.grad_fn {
                stack.extend(g.parents.iter().filter(|p| p.requires_grad()).cloned());
            }
            order.push(t);
        }
        // Parents are always created before children, so descending ids are a
        // valid reverse topological order.
        order.sort_unstable_by_key(|t| std::cmp::Reverse(t.id()));

        let mut pending: HashMap<u64, Vec<T>> = HashMap::new();
        pending.insert(self.id(), vec![T::one()]);
        for t in order {
            let Some(g) = pending.remove(&t.id()) else { continue };
            match &t.node.grad_fn {
                None => {
                    let mut slot = t.node.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                        None => *slot = Some(g),
                    }
                }
                Some(gf) => {
                    let needs: Vec<bool> = gf.parents.iter().map(|p| p.requires_grad()).collect();
                    let grads = (gf.backward)(&g, &needs);
                    for (parent, pg) in gf.parents.iter().zip(grads) {
                        let Some(pg) = pg else { continue };
                        if !parent.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), parent.numel(), "grad size from {}", gf.name);
                        match pending.get_mut(&parent.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, &b)| *a = *a + b),
                            None => {
                                pending.insert(parent.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(TensorError::shape(
                op,
                format!("expected rank {}, got shape {:?}", rank, self.shape()),
            ));
        }
        Ok(())
    }
}
