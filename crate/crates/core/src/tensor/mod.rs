//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Eager execution over an explicit graph: every op computes its value
//! immediately and registers a backward closure. `backward()` walks the
//! graph in reverse topological order, visiting each node exactly once and
//! accumulating (never overwriting) gradients. Graph construction is
//! single-threaded; kernels may split work across threads but always produce
//! bit-identical results for a given input.

mod kernels;
mod ops;

pub use ops::mse;

use std::cell::{Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Backward rule: receives the output gradient and the output data, and
/// accumulates into the gradients of the parents it captured.
type BackwardFn<S> = Box<dyn Fn(&[S], &[S])>;

struct BackOp<S: Scalar> {
    parents: Vec<Tensor<S>>,
    backward: BackwardFn<S>,
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<S>>,
    grad: RefCell<Option<Vec<S>>>,
    /// Leaf that accumulates gradients (a trainable value).
    requires_grad: bool,
    /// True if any gradient flows through this node.
    needs_grad: bool,
    op: Option<BackOp<S>>,
}

/// A dense multi-dimensional value participating in a reverse-mode
/// differentiation graph. Cloning is cheap (shared handle).
pub struct Tensor<S: Scalar> {
    inner: Rc<Inner<S>>,
}

impl<S: Scalar> Clone for Tensor<S> {
    fn clone(&self) -> Self {
        Tensor {
            inner: Rc::clone(&self.inner),
        }
    }
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

pub(crate) fn check_shape_len(shape: &[usize], len: usize) -> Result<()> {
    let numel: usize = shape.iter().product();
    if numel != len {
        return Err(CoreError::InvalidArgument(format!(
            "data length {len} does not match shape {shape:?} (numel {numel})"
        )));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    fn new_inner(
        shape: Vec<usize>,
        data: Vec<S>,
        requires_grad: bool,
        needs_grad: bool,
        op: Option<BackOp<S>>,
    ) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad,
                op,
            }),
        }
    }

    /// Leaf tensor that does not track gradients.
    pub fn from_vec(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        check_shape_len(shape, data.len())?;
        Ok(Self::new_inner(shape.to_vec(), data, false, false, None))
    }

    /// Leaf tensor from f64 values (convenient for literals in tests).
    pub fn from_f64s(vals: &[f64], shape: &[usize]) -> Result<Self> {
        Self::from_vec(vals.iter().map(|&v| S::from_f64(v)).collect(), shape)
    }

    /// Trainable leaf: accumulates gradients during backward.
    pub fn param(data: Vec<S>, shape: &[usize]) -> Result<Self> {
        check_shape_len(shape, data.len())?;
        Ok(Self::new_inner(shape.to_vec(), data, true, true, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new_inner(shape.to_vec(), vec![S::zero(); numel], false, false, None)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let numel = shape.iter().product();
        Self::new_inner(
            shape.to_vec(),
            vec![S::from_f64(v); numel],
            false,
            false,
            None,
        )
    }

    pub fn scalar(v: f64) -> Self {
        Self::full(&[1], v)
    }

    /// Leaf filled with N(0, std^2) samples.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let s = S::from_f64(std);
        let data: Vec<S> = (0..numel).map(|_| S::standard_normal(rng) * s).collect();
        Self::new_inner(shape.to_vec(), data, false, false, None)
    }

    /// Internal constructor for op results.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<S>,
        parents: Vec<Tensor<S>>,
        backward: BackwardFn<S>,
    ) -> Self {
        let needs = parents.iter().any(|p| p.inner.needs_grad);
        let op = if needs {
            Some(BackOp { parents, backward })
        } else {
            None
        };
        Self::new_inner(shape, data, false, needs, op)
    }

    pub fn id(&self) -> u64 {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }

    pub fn data(&self) -> Ref<'_, Vec<S>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<S> {
        self.inner.data.borrow().clone()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().iter().map(|v| v.to_f64_lossy()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> S {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn is_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    /// Overwrite the data of a leaf tensor (optimizer updates, checkpoint
    /// loading). Length must match the existing shape.
    pub fn set_data(&self, new: &[S]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), new.len(), "set_data length mismatch");
        d.copy_from_slice(new);
    }

    /// Apply an in-place update to the data of a leaf tensor.
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Accumulate into this tensor's gradient buffer, allocating zeros on
    /// first touch.
    pub(crate) fn with_grad_mut(&self, f: impl FnOnce(&mut [S])) {
        let mut g = self.inner.grad.borrow_mut();
        let buf = g.get_or_insert_with(|| vec![S::zero(); self.numel()]);
        f(buf);
    }

    pub(crate) fn accumulate_grad(&self, delta: &[S]) {
        self.with_grad_mut(|g| {
            for (gi, di) in g.iter_mut().zip(delta.iter()) {
                *gi += *di;
            }
        });
    }

    /// Reverse-mode sweep from a single-element tensor. Visits each node
    /// exactly once; gradients accumulate on `requires_grad` leaves until
    /// explicitly zeroed. Intermediate gradients are released as soon as
    /// they have been consumed.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(CoreError::InvalidArgument(format!(
                "backward() requires a single-element tensor, got shape {:?}",
                self.shape()
            )));
        }
        if !self.inner.needs_grad {
            return Ok(());
        }
        self.with_grad_mut(|g| g[0] = g[0] + S::one());

        // Iterative DFS postorder over parents: leaves first, root last.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor<S>, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.inner.id);
        while let Some((node, child_idx)) = stack.pop() {
            let n_parents = node.inner.op.as_ref().map_or(0, |op| op.parents.len());
            if child_idx < n_parents {
                stack.push((node.clone(), child_idx + 1));
                let parent = node.inner.op.as_ref().unwrap().parents[child_idx].clone();
                if parent.inner.needs_grad && visited.insert(parent.inner.id) {
                    stack.push((parent, 0));
                }
            } else {
                order.push(node);
            }
        }

        // Root last in postorder; process in reverse so every node's grad is
        // complete before its backward rule runs.
        for node in order.iter().rev() {
            let Some(op) = node.inner.op.as_ref() else {
                continue;
            };
            let grad = node.inner.grad.borrow_mut().take();
            let Some(grad) = grad else { continue };
            let out_data = node.inner.data.borrow();
            (op.backward)(&grad, &out_data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_shape_checks() {
        assert!(Tensor::<f64>::from_vec(vec![1.0, 2.0], &[3]).is_err());
        let t = Tensor::<f64>::from_vec(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        assert_eq!(t.numel(), 3);
        assert!(!t.needs_grad());
    }

    #[test]
    fn diamond_graph_accumulates_both_paths() {
        let x = Tensor::<f64>::param(vec![3.0], &[1]).unwrap();
        let y = x.add(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn gradients_accumulate_across_backward_calls() {
        let x = Tensor::<f64>::param(vec![1.0], &[1]).unwrap();
        let y = x.affine(2.0, 0.0);
        y.backward().unwrap();
        let z = x.affine(3.0, 0.0);
        z.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![5.0]);
        x.zero_grad();
        assert!(x.grad().is_none());
    }

    #[test]
    fn backward_requires_scalar() {
        let x = Tensor::<f64>::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.affine(1.0, 0.0);
        assert!(y.backward().is_err());
    }
}
