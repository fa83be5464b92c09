//! Dense n-dimensional tensors.
//!
//! A [`Tensor`] is a plain value container: row-major data plus a [`Shape`].
//! Gradients live on the autodiff tape ([`crate::tape::Tape`]) and in the
//! parameter store, not here; tensors themselves are immutable in normal use
//! once built.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::Shape;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Shape,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Result<Self> {
        if shape.count() != data.len() {
            return Err(Error::invalid(
                "tensor",
                format!(
                    "shape {shape} implies {} elements, got {}",
                    shape.count(),
                    data.len()
                ),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        let n = shape.count();
        Tensor {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: Shape, v: S) -> Self {
        let n = shape.count();
        Tensor {
            shape,
            data: vec![v; n],
        }
    }

    pub fn scalar(v: S) -> Self {
        Tensor {
            shape: Shape::scalar(),
            data: vec![v],
        }
    }

    pub fn from_vec(data: Vec<S>) -> Self {
        let shape = Shape::new(vec![data.len()]);
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row-major 2-d accessor (tests and small hot-free paths only).
    pub fn at2(&self, i: usize, j: usize) -> S {
        debug_assert_eq!(self.shape.rank(), 2);
        self.data[i * self.shape.dim(1) + j]
    }

    /// Row-major NHWC accessor.
    pub fn at4(&self, n: usize, h: usize, w: usize, c: usize) -> S {
        debug_assert_eq!(self.shape.rank(), 4);
        let (hh, ww, cc) = (self.shape.dim(1), self.shape.dim(2), self.shape.dim(3));
        self.data[((n * hh + h) * ww + w) * cc + c]
    }

    /// Lossless for f32 -> f64; rounds for f64 -> f32.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from_f64(v.as_f64())).collect(),
        }
    }
}
