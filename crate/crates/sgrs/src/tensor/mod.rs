//! Dense row-major tensors and the reverse-mode gradient tape.
//!
//! Everything array-valued in the pipeline (images, logits, probability
//! maps, parameters) is a [`Tensor`]. Differentiable computation happens
//! on a [`Tape`], which records a define-by-run graph of exactly the
//! primitives the training objective needs.

mod kernels;
mod tape;

pub use tape::{Gradients, Tape, Value};

use crate::error::{shape_err, Result};
use num_traits::Float;
use std::fmt::{Debug, Display};

/// Element types tensors support: `f32` for training, `f64` for
/// finite-difference gradient checks.
pub trait Scalar:
    Float + Debug + Display + Default + Send + Sync + 'static + std::iter::Sum
{
    /// Dtype code in the TSR v1 file format.
    const TSR_DTYPE: u8;
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn to_le_bytes(self) -> [u8; 8];
    fn from_le_slice(b: &[u8]) -> Self;
    /// Bytes per element on disk.
    const WIDTH: usize;
}

impl Scalar for f32 {
    const TSR_DTYPE: u8 = 0;
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn to_le_bytes(self) -> [u8; 8] {
        let mut out = [0u8; 8];
        out[..4].copy_from_slice(&f32::to_le_bytes(self));
        out
    }
    fn from_le_slice(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
    const WIDTH: usize = 4;
}

impl Scalar for f64 {
    const TSR_DTYPE: u8 = 1;
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn to_le_bytes(self) -> [u8; 8] {
        f64::to_le_bytes(self)
    }
    fn from_le_slice(b: &[u8]) -> Self {
        f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]])
    }
    const WIDTH: usize = 8;
}

/// Shorthand for lifting an `f64` literal into the scalar type.
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x)
}

/// Dense n-dimensional array, row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    dims: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(shape_err(format!("zero extent in dims {dims:?}")));
        }
        if n != data.len() {
            return Err(shape_err(format!(
                "dims {dims:?} imply {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn zeros(dims: Vec<usize>) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(dims: Vec<usize>, value: T) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Value of a rank-1 single-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Casts elementwise through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(Scalar::to_f64(v)))
                .collect(),
        }
    }

    /// Linear offset for a 4-d index.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        debug_assert_eq!(self.dims.len(), 4);
        ((n * self.dims[1] + c) * self.dims[2] + y) * self.dims[3] + x
    }

    /// Mirrors along the last axis (width).
    pub fn flip_w(&self) -> Self {
        let w = *self.dims.last().expect("flip_w on rank-0 tensor");
        let mut data = self.data.clone();
        for row in data.chunks_mut(w) {
            row.reverse();
        }
        Tensor {
            dims: self.dims.clone(),
            data,
        }
    }

    /// Mirrors along the second-to-last axis (height).
    pub fn flip_h(&self) -> Self {
        let rank = self.dims.len();
        assert!(rank >= 2, "flip_h needs rank >= 2");
        let w = self.dims[rank - 1];
        let h = self.dims[rank - 2];
        let mut data = self.data.clone();
        for plane in data.chunks_mut(h * w) {
            for y in 0..h / 2 {
                let (top, rest) = plane.split_at_mut((h - 1 - y) * w);
                top[y * w..y * w + w].swap_with_slice(&mut rest[..w]);
            }
        }
        Tensor {
            dims: self.dims.clone(),
            data,
        }
    }
}

impl<T: Scalar> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.dims)?;
        if self.data.len() <= 8 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}
