//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Rc`) to a shape, a row-major data
//! buffer, and an optional gradient buffer of the same shape. Operations
//! live in [`ops`] and record their backward rules on an explicit
//! [`Graph`]; [`Graph::backward`] replays them in reverse topological
//! order and accumulates gradients into every `requires_grad` leaf.
//!
//! Everything is 64-bit: the test suite leans on central finite
//! differences, and f32 noise would drown the tolerances.

mod graph;
pub mod ops;
pub mod optim;

pub use graph::Graph;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::rc::Rc;

use crate::error::{Error, Result};

struct TensorInner {
    shape: RefCell<Vec<usize>>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: Cell<bool>,
}

/// Shared handle to an n-dimensional f64 array; clones alias the same storage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &*self.inner.shape.borrow())
            .field("requires_grad", &self.inner.requires_grad.get())
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "from_vec",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape: RefCell::new(shape),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: Cell::new(false),
            }),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel]).expect("zeros: sizes agree")
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Tensor {
        let numel = shape.iter().product();
        Tensor::from_vec(shape, vec![value; numel]).expect("filled: sizes agree")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![value]).expect("scalar")
    }

    /// Marks the tensor as a trainable leaf and returns it.
    pub fn trainable(self) -> Tensor {
        self.inner.requires_grad.set(true);
        self
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.shape.borrow().clone()
    }

    /// Extent of axis `i`.
    pub fn dim(&self, i: usize) -> usize {
        self.inner.shape.borrow()[i]
    }

    pub fn ndim(&self) -> usize {
        self.inner.shape.borrow().len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.borrow().iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad.get()
    }

    pub fn set_requires_grad(&self, on: bool) {
        self.inner.requires_grad.set(on);
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        let data = self.inner.data.borrow();
        assert_eq!(data.len(), 1, "item() on tensor with {} elements", data.len());
        data[0]
    }

    /// Replaces shape and data in place, dropping any gradient.
    pub fn reset(&self, shape: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(
                "reset",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        *self.inner.shape.borrow_mut() = shape;
        *self.inner.data.borrow_mut() = data;
        *self.inner.grad.borrow_mut() = None;
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    pub(crate) fn set_grad(&self, g: Vec<f64>) {
        debug_assert_eq!(g.len(), self.numel());
        *self.inner.grad.borrow_mut() = Some(g);
    }

    /// Adds `delta` into the gradient buffer, creating it on first use.
    pub fn accumulate_grad(&self, delta: &[f64]) {
        debug_assert_eq!(delta.len(), self.numel());
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => *slot = Some(delta.to_vec()),
        }
    }

    /// Runs `f` with a zero-initialized mutable gradient buffer.
    pub(crate) fn with_grad_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        let mut slot = self.inner.grad.borrow_mut();
        if slot.is_none() {
            *slot = Some(vec![0.0; self.numel()]);
        }
        f(slot.as_mut().unwrap())
    }

    pub fn all_finite(&self) -> bool {
        self.inner.data.borrow().iter().all(|v| v.is_finite())
    }

    pub fn grad_all_finite(&self) -> bool {
        match self.inner.grad.borrow().as_ref() {
            Some(g) => g.iter().all(|v| v.is_finite()),
            None => true,
        }
    }

    /// Stable address of the shared storage; used to deduplicate handles.
    pub fn id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    /// True if both handles alias the same storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

/// Checks an op output for NaN/Inf before it enters the graph.
pub(crate) fn check_finite(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(op))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_agreement_enforced() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_accumulates_across_uses() {
        let t = Tensor::zeros(vec![3]).trainable();
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad().unwrap(), vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn clones_alias_storage() {
        let t = Tensor::zeros(vec![2]);
        let u = t.clone();
        u.data_mut()[0] = 5.0;
        assert_eq!(t.to_vec(), vec![5.0, 0.0]);
        assert!(t.same_storage(&u));
    }
}
