//! Dense row-major f64 tensors with an optional gradient buffer.
//!
//! A `Tensor` is a cheap-to-clone handle to shared storage. Values are
//! immutable once an op has produced them; only the gradient buffer and
//! explicit parameter updates ([`Tensor::assign`]) mutate storage. All
//! differentiable ops live on [`crate::tape::Tape`].

use std::cell::{Ref, RefCell};
use std::fmt;
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};

struct Inner {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Shared handle to an n-dimensional f64 array.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<Inner>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.borrow();
        write!(
            f,
            "Tensor{:?} requires_grad={} data[..4]={:?}",
            inner.shape,
            inner.requires_grad,
            &inner.data[..inner.data.len().min(4)]
        )
    }
}

pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if numel_of(&shape) != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel_of(&shape),
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(RefCell::new(Inner {
                shape,
                data,
                grad: None,
                requires_grad: false,
            })),
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let n = numel_of(&shape);
        Tensor::from_vec(shape, vec![0.0; n]).expect("consistent by construction")
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Tensor {
        let n = numel_of(&shape);
        Tensor::from_vec(shape, vec![value; n]).expect("consistent by construction")
    }

    pub fn scalar(value: f64) -> Tensor {
        Tensor::from_vec(vec![1], vec![value]).expect("consistent by construction")
    }

    /// Standard-normal entries scaled by `std`.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut impl Rng) -> Tensor {
        let n = numel_of(&shape);
        // Box-Muller on the rng's uniform stream; avoids a distributions dep
        // difference and keeps the draw order explicit.
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (2.0 * std::f64::consts::PI * u2).sin_cos();
            data.push(r * c * std);
            if data.len() < n {
                data.push(r * s * std);
            }
        }
        Tensor::from_vec(shape, data).expect("consistent by construction")
    }

    /// Marks the tensor as a trainable leaf.
    pub fn into_param(self) -> Tensor {
        self.inner.borrow_mut().requires_grad = true;
        self
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn dim(&self, i: usize) -> usize {
        self.inner.borrow().shape[i]
    }

    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |i| i.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar extraction; panics if the tensor is not a single element.
    pub fn item(&self) -> f64 {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn set_requires_grad(&self, v: bool) {
        self.inner.borrow_mut().requires_grad = v;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    /// No-op unless the tensor requires grad.
    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        debug_assert_eq!(inner.data.len(), delta.len());
        match &mut inner.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => inner.grad = Some(delta.to_vec()),
        }
    }

    /// Like [`Tensor::accumulate_grad`] but takes the buffer by value, so the
    /// common first contribution installs without a copy.
    pub(crate) fn accumulate_grad_owned(&self, delta: Vec<f64>) {
        let mut inner = self.inner.borrow_mut();
        if !inner.requires_grad {
            return;
        }
        debug_assert_eq!(inner.data.len(), delta.len());
        match &mut inner.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => inner.grad = Some(delta),
        }
    }

    /// Borrow of the gradient buffer, if any.
    pub(crate) fn grad_ref(&self) -> Option<Ref<'_, [f64]>> {
        let inner = self.inner.borrow();
        if inner.grad.is_some() {
            Some(Ref::map(inner, |i| {
                i.grad.as_deref().expect("checked above")
            }))
        } else {
            None
        }
    }

    pub(crate) fn seed_grad_one(&self) {
        let mut inner = self.inner.borrow_mut();
        let n = inner.data.len();
        inner.grad = Some(vec![1.0; n]);
    }

    pub(crate) fn grad_snapshot(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Overwrites the stored values (shape must match). Used by the optimizer
    /// and by finite-difference probes.
    pub fn assign(&self, data: &[f64]) {
        let mut inner = self.inner.borrow_mut();
        assert_eq!(inner.data.len(), data.len(), "assign length mismatch");
        inner.data.copy_from_slice(data);
    }

    /// In-place update of a single element (finite-difference probes).
    pub fn nudge(&self, idx: usize, delta: f64) {
        self.inner.borrow_mut().data[idx] += delta;
    }

    /// Deep copy with gradients dropped and `requires_grad` cleared.
    pub fn detach(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::from_vec(inner.shape.clone(), inner.data.clone())
            .expect("consistent by construction")
    }

    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn is_finite(&self) -> bool {
        self.inner.borrow().data.iter().all(|v| v.is_finite())
    }
}

/// Row-major strides for a shape.
pub fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn from_vec_rejects_mismatched_shape() {
        let err = Tensor::from_vec(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn grad_accumulates_only_when_required() {
        let t = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0]);
        assert!(t.grad().is_none());
        let p = t.into_param();
        p.accumulate_grad(&[1.0, 1.0]);
        p.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(p.grad().unwrap(), vec![1.5, 1.5]);
    }

    #[test]
    fn randn_is_seeded_and_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(9);
        let mut r2 = ChaCha8Rng::seed_from_u64(9);
        let a = Tensor::randn(vec![7], 0.3, &mut r1);
        let b = Tensor::randn(vec![7], 0.3, &mut r2);
        assert_eq!(a.to_vec(), b.to_vec());
    }

    #[test]
    fn strides_are_row_major() {
        assert_eq!(strides_of(&[2, 3, 4]), vec![12, 4, 1]);
        assert_eq!(strides_of(&[5]), vec![1]);
    }
}
