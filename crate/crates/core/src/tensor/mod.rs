//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Calling
//! [`Tape::backward`] on a scalar replays the record in reverse and adds
//! the resulting adjoints into per-node gradient accumulators, so several
//! backward calls on the same tape sum their contributions.
//!
//! All arithmetic is generic over [`Real`]; training runs in `f32`, while
//! gradient checks and reference comparisons run in `f64`.

mod gradcheck;
mod kernels;
mod ops;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use kernels::{gemm_nn, gemm_nt, gemm_tn};
pub use tape::{Tape, Var};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of a tensor.
pub trait Real:
    Float
    + Default
    + Debug
    + Display
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense tensor with a same-shaped gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    grad: Vec<T>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(&shape) != data.len() {
            return Err(Error::shape("tensor", &shape, &[data.len()]));
        }
        let grad = vec![T::zero(); data.len()];
        Ok(Tensor { shape, data, grad })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = numel(shape);
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: vec![T::zero(); n],
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let mut t = Self::zeros(shape);
        t.data.fill(value);
        t
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: vec![T::zero()],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let mut t = Self::zeros(shape);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn grad(&self) -> &[T] {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut [T] {
        &mut self.grad
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    /// Adds `g` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, g: &[T]) {
        debug_assert_eq!(g.len(), self.grad.len());
        for (a, &b) in self.grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    /// Same values in another precision; the gradient is reset.
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
            grad: vec![U::zero(); self.data.len()],
        }
    }

    /// Euclidean norm of the gradient, accumulated in `f64`.
    pub fn grad_norm(&self) -> f64 {
        self.grad
            .iter()
            .map(|g| g.as_f64() * g.as_f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Entropy `-sum p log p` of each row of a row-stochastic matrix, with the
/// logarithm floored at `1e-12` so zero-probability entries contribute 0.
pub fn row_entropy(probs: &[f64], cols: usize) -> Vec<f64> {
    probs
        .chunks(cols)
        .map(|row| -row.iter().map(|&p| p * p.max(1e-12).ln()).sum::<f64>())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]),
            Err(Error::Shape { .. })
        ));
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn grad_starts_zero_and_resets() {
        let mut t = Tensor::<f32>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        assert!(t.grad().iter().all(|&g| g == 0.0));
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        t.accumulate_grad(&[1.0, 0.0, 2.0]);
        assert_eq!(t.grad(), &[2.0, 1.0, 3.0]);
        t.zero_grad();
        assert!(t.grad().iter().all(|&g| g == 0.0));
        assert_eq!(t.data().len(), t.grad().len());
    }

    #[test]
    fn entropy_of_uniform_pair_is_ln2() {
        let h = row_entropy(&[0.5, 0.5, 1.0, 0.0], 2);
        assert!((h[0] - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(h[1], 0.0);
    }
}
