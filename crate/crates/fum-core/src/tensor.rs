//! Dense row-major tensors with an optional gradient buffer.

use crate::error::{Error, Result};

#[cfg(not(feature = "single-precision"))]
pub type Real = f64;
#[cfg(feature = "single-precision")]
pub type Real = f32;

/// A dense numeric array in row-major order. Rank is 1 (vector) or 2
/// (matrix) everywhere in this crate; a scalar is a length-1 vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<Real>,
    requires_grad: bool,
    grad: Option<Vec<Real>>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<Real>) -> Result<Self> {
        if shape.iter().any(|&e| e == 0) || numel(&shape) != values.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                what: format!("does not match {} values", values.len()),
            });
        }
        Ok(Tensor {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(v: Real) -> Self {
        Tensor::new(vec![1], vec![v]).unwrap()
    }

    pub fn vector(values: Vec<Real>) -> Self {
        let n = values.len();
        Tensor::new(vec![n], values).unwrap()
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<Real>) -> Result<Self> {
        Tensor::new(vec![rows, cols], values)
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[Real] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Real] {
        &mut self.values
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    pub fn grad(&self) -> Option<&[Real]> {
        self.grad.as_deref()
    }

    /// Makes sure a gradient buffer exists, zero-filled if it was absent.
    pub fn ensure_grad(&mut self) -> &mut [Real] {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.values.len()]);
        }
        self.grad.as_deref_mut().unwrap()
    }

    pub fn zero_grad(&mut self) {
        self.ensure_grad().fill(0.0);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn accumulate_grad(&mut self, delta: &[Real]) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                lhs: self.shape.clone(),
                rhs: vec![delta.len()],
            });
        }
        let g = self.ensure_grad();
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += *di;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
            && self
                .grad
                .as_ref()
                .is_none_or(|g| g.iter().all(|v| v.is_finite()))
    }
}
