//! Dense row-major tensors and the reverse-mode tape.

mod check;
mod tape;
#[cfg(test)]
mod tests;

pub use check::{finite_diff_check, FiniteDiffReport};
pub use tape::{GradientMap, NodeId, Tape};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense n-dimensional array of scalars, row-major.
///
/// `data.len()` equals the product of `dims` at all times; every extent is
/// positive. Gradient participation is handled by the [`Tape`], which owns
/// copies of tensors as nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    dims: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(dims: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if dims.is_empty() || dims.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!(
                "tensor extents must be positive, got {dims:?}"
            )));
        }
        let numel: usize = dims.iter().product();
        if data.len() != numel {
            return Err(Error::contract(format!(
                "tensor data length {} does not match dims {:?} (numel {})",
                data.len(),
                dims,
                numel
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![S::zero(); numel],
        }
    }

    pub fn full(dims: &[usize], v: S) -> Self {
        let numel = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![v; numel],
        }
    }

    /// 1-element tensor with dims `[1]`.
    pub fn scalar(v: S) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![v],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// True when every dim is 1 (the scalar contract used by `backward`).
    pub fn is_scalar(&self) -> bool {
        self.dims.iter().all(|&d| d == 1)
    }

    /// Value of a 1-element tensor.
    pub fn item(&self) -> S {
        debug_assert!(self.numel() == 1);
        self.data[0]
    }

    /// Rows/cols view: 1-D is a single row, 2-D is as stored.
    pub fn shape2d(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.dims.len() {
            1 => Ok((1, self.dims[0])),
            2 => Ok((self.dims[0], self.dims[1])),
            _ => Err(Error::Shape {
                op,
                lhs: self.dims.clone(),
                rhs: vec![],
            }),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |acc, v| acc.max(v.abs()))
    }

    /// Elementwise in-place accumulate; dims must match.
    pub(crate) fn add_assign(&mut self, other: &Tensor<S>) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(other.data.iter()) {
            *a = *a + *b;
        }
    }

    /// Bitwise equality (exact bit patterns, not float semantics).
    pub fn bitwise_eq(&self, other: &Tensor<S>) -> bool {
        self.dims == other.dims
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_f64().map(f64::to_bits) == b.to_f64().map(f64::to_bits))
    }
}

impl Tensor<f64> {
    pub fn from_f64(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(dims, data)
    }
}

#[cfg(test)]
mod shape_tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_has_all_dims_one() {
        assert!(Tensor::scalar(3.5f64).is_scalar());
        assert!(!Tensor::<f64>::zeros(&[2]).is_scalar());
    }

    #[test]
    fn generic_over_f32_and_f64() {
        let a = Tensor::<f32>::full(&[2, 2], 1.5);
        let b = Tensor::<f64>::full(&[2, 2], 1.5);
        assert_eq!(a.numel(), b.numel());
        assert_eq!(a.max_abs(), 1.5f32);
        assert_eq!(b.max_abs(), 1.5f64);
    }
}
