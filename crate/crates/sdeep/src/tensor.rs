//! Dense `f64` tensors in row-major layout.
//!
//! A [`Tensor`] is a shape plus a flat data buffer. Tensors that participate in
//! optimization are marked `requires_grad` and carry a gradient buffer of the
//! same shape; everything else stays lean. All numerics in this crate are `f64`
//! end to end — reproducibility matters more than raw speed here.

use thiserror::Error;

/// Errors produced by tensor construction and graph operations.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, data has {actual}")]
    ShapeDataMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },

    /// An operation received operands whose extents do not fit together.
    /// Always names the operation and the offending extents.
    #[error("{op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: node id {id} does not exist in this graph")]
    UnknownNode { op: &'static str, id: usize },

    #[error("label {label} out of range for {classes} classes (row {row})")]
    LabelOutOfRange {
        label: usize,
        classes: usize,
        row: usize,
    },
}

/// Number of elements implied by a shape (empty shape = scalar = 1 element).
pub fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// A dense row-major `f64` tensor with an optional gradient buffer.
///
/// Invariants (enforced by construction):
/// - `data.len() == shape.iter().product()`
/// - a gradient buffer is present if and only if `requires_grad`, and it
///   always has the same length as `data`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a flat buffer, checking the element count.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self, TensorError> {
        let expected = numel_of(shape);
        if data.len() != expected {
            return Err(TensorError::ShapeDataMismatch {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    /// All-zeros tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel_of(shape)],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-0 scalar.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Rank-1 tensor owning the given values.
    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            shape: vec![n],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as an optimization target, allocating its gradient.
    pub fn with_requires_grad(mut self) -> Self {
        self.set_requires_grad(true);
        self
    }

    pub fn set_requires_grad(&mut self, requires: bool) {
        self.requires_grad = requires;
        if requires {
            if self.grad.is_none() {
                self.grad = Some(vec![0.0; self.data.len()]);
            }
        } else {
            self.grad = None;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Gradient buffer, present iff `requires_grad`.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    /// Resets the gradient buffer to zeros (no-op without `requires_grad`).
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// True when every element is finite (no NaN/inf anywhere).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Tensor::new(self.data.clone(), shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_data_must_agree() {
        let err = Tensor::new(vec![1.0, 2.0, 3.0], &[2, 2]).unwrap_err();
        match err {
            TensorError::ShapeDataMismatch {
                expected, actual, ..
            } => {
                assert_eq!(expected, 4);
                assert_eq!(actual, 3);
            }
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn scalar_has_empty_shape_and_one_element() {
        let s = Tensor::scalar(3.5);
        assert_eq!(s.shape(), &[] as &[usize]);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.data(), &[3.5]);
    }

    #[test]
    fn grad_present_iff_requires_grad() {
        let mut t = Tensor::zeros(&[2, 3]);
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        assert_eq!(t.grad().unwrap().len(), 6);
        t.set_requires_grad(false);
        assert!(t.grad().is_none());
    }

    #[test]
    fn reshape_preserves_data() {
        let t = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let r = t.reshaped(&[4]).unwrap();
        assert_eq!(r.shape(), &[4]);
        assert_eq!(r.data(), t.data());
        assert!(t.reshaped(&[3]).is_err());
    }
}
