//! Dense row-major tensor.
//!
//! Canonical layouts are `[N, C, H, W]` for image batches, `[n, d]` for
//! matrices and `[d]` for vectors. Values are stored flat in row-major order
//! behind an `Arc`, so cloning a tensor is cheap and tensors can be shared
//! across threads. Tensors are immutable once built; operations return new
//! tensors. Gradients recorded by a [`crate::tape::Tape`] can be attached via
//! [`Tensor::with_grad`].

use std::sync::Arc;

use crate::elem::Elem;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Tensor<E: Elem> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    requires_grad: bool,
    grad: Option<Arc<Vec<E>>>,
}

impl<E: Elem> Tensor<E> {
    /// Builds a tensor, validating the shape/data contract: extents >= 1,
    /// `len(values) == product(shape)`, all values finite.
    pub fn new(shape: &[usize], values: Vec<E>, requires_grad: bool) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::BadExtent(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(values),
            requires_grad,
            grad: None,
        })
    }

    /// Like [`Tensor::new`] but skips the finiteness scan. For internal use by
    /// ops whose outputs are finite by construction or checked separately.
    pub(crate) fn from_parts(shape: Vec<usize>, values: Vec<E>, requires_grad: bool) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Self {
            shape,
            data: Arc::new(values),
            requires_grad,
            grad: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![E::ZERO; n], false)
    }

    pub fn full(shape: &[usize], v: E) -> Result<Self> {
        let n: usize = shape.iter().product();
        Self::new(shape, vec![v; n], false)
    }

    pub fn scalar(v: E) -> Self {
        Self::from_parts(vec![1], vec![v], false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false // extents >= 1 by construction
    }

    pub fn values(&self) -> &[E] {
        &self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    /// Gradient attached to this tensor, if any. Same length as `values`.
    pub fn grad(&self) -> Option<&[E]> {
        self.grad.as_deref().map(|v| v.as_slice())
    }

    /// Returns a copy of this tensor with `grad` attached.
    pub fn with_grad(&self, grad: Vec<E>) -> Result<Self> {
        if grad.len() != self.data.len() {
            return Err(Error::LengthMismatch {
                shape: self.shape.clone(),
                expected: self.data.len(),
                got: grad.len(),
            });
        }
        let mut t = self.clone();
        t.grad = Some(Arc::new(grad));
        Ok(t)
    }

    /// Mutable view of the values, copying only if the buffer is shared.
    /// Drops any attached gradient, which would be stale after the edit.
    pub fn values_mut(&mut self) -> &mut [E] {
        self.grad = None;
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Reinterprets the flat buffer under a new shape without copying.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::BadExtent(shape.to_vec()));
        }
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                got: self.data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
        })
    }

    /// Converts every element, e.g. between f32 and f64.
    pub fn cast<T: Elem>(&self) -> Tensor<T> {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|v| T::from_f64(v.to_f64())).collect(),
            self.requires_grad,
        )
    }

    pub(crate) fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Errors if any value is non-finite. Every op in this crate upholds the
    /// all-finite invariant by calling this on fresh outputs.
    pub(crate) fn check_finite(&self) -> Result<()> {
        if let Some(index) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(())
    }
}

/// `tensor_new` from the module contract: shape + flat values + grad flag.
pub fn tensor_new<E: Elem>(shape: &[usize], values: Vec<E>, requires_grad: bool) -> Result<Tensor<E>> {
    Tensor::new(shape, values, requires_grad)
}
