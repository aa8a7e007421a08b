//! Dense row-major tensor with an optional gradient buffer.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// N-dimensional array of scalars in row-major order.
///
/// Leaves the engine differentiates (model parameters) carry
/// `requires_grad = true`; [`crate::graph::Graph::backward`] fills `grad`
/// via the parameter binding helpers.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F: Scalar = f64> {
    shape: Vec<usize>,
    data: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
}

impl<F: Scalar> Tensor<F> {
    pub fn from_vec(shape: Vec<usize>, data: Vec<F>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {:?} implies {} elements, got {}",
            shape,
            numel,
            data.len()
        );
        assert!(shape.iter().all(|&d| d > 0), "extents must be positive");
        Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![F::zero(); numel])
    }

    pub fn scalar(v: F) -> Self {
        Tensor::from_vec(vec![1], vec![v])
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) {
        assert_eq!(grad.len(), self.data.len(), "grad/value length mismatch");
        self.grad = Some(grad);
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Element at a 2-D index; rows are the leading extent.
    pub fn at2(&self, row: usize, col: usize) -> F {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, r: usize) -> &[F] {
        debug_assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn check_shape(&self, expected: &[usize], op: &'static str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::Dimension {
                op,
                lhs: self.shape.clone(),
                rhs: expected.to_vec(),
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_numel_agree() {
        let t: Tensor = Tensor::zeros(vec![2, 3]);
        assert_eq!(t.numel(), 6);
        assert_eq!(t.shape(), &[2, 3]);
    }

    #[test]
    #[should_panic]
    fn mismatched_data_panics() {
        let _: Tensor = Tensor::from_vec(vec![2, 2], vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn f32_instantiation_works() {
        let t: Tensor<f32> = Tensor::from_vec(vec![2], vec![3.0, 4.0]);
        assert_eq!(t.data(), &[3.0f32, 4.0]);
    }
}
