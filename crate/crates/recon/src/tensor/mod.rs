//! Minimal dense tensor with reverse-mode autodiff over the fixed op set
//! used by the networks and losses.
//!
//! Real tensors are generic over `f32` (training) and `f64` (verification).
//! Complex data lives in [`crate::mri::CArray`] and enters the tape as
//! 2-channel real views.

mod conv;
mod container;
mod gradcheck;
mod optim;
mod tape;

pub use container::{load_checkpoint, load_complex, load_real, save_checkpoint, save_complex,
                    save_real, CheckpointIndex};
pub use conv::{conv2d_raw, conv_transpose2d_raw};
pub use gradcheck::{gradcheck, gradcheck_with_skip};
pub use optim::{cosine_lr, AdamConfig, Binding, ParamStore};
pub use tape::{Graph, NodeId, SelfAdjointMap};

use crate::error::{Error, Result};

/// Element type of real tensors. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + rustfft::FftNum
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    /// Container dtype code (1 = f32, 2 = f64).
    const DTYPE_CODE: u8;

    fn of_f64(x: f64) -> Self {
        num_traits::FromPrimitive::from_f64(x).unwrap()
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap()
    }

    /// Row-major GEMM `c = alpha * a b + beta * c` with `a` m-by-k, `b` k-by-n.
    ///
    /// # Safety
    /// `a`, `b`, `c` must point to buffers of at least m*k, k*n, m*n elements.
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        b: *const Self,
        beta: Self,
        c: *mut Self,
    );
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 1;

    unsafe fn gemm(m: usize, k: usize, n: usize, alpha: f32, a: *const f32, b: *const f32, beta: f32, c: *mut f32) {
        matrixmultiply::sgemm(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
    }
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 2;

    unsafe fn gemm(m: usize, k: usize, n: usize, alpha: f64, a: *const f64, b: *const f64, beta: f64, c: *mut f64) {
        matrixmultiply::dgemm(m, k, n, alpha, a, k as isize, 1, b, n as isize, 1, beta, c, n as isize, 1);
    }
}

/// Dense row-major multi-dimensional array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "tensor: shape {:?} implies {} elements, buffer has {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); n], requires_grad: false }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n], requires_grad: false }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn from_f64_slice(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::of_f64(v)).collect())
    }

    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn wants_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Scalar tensors (len 1) unwrap to their single value.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::Shape(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            requires_grad: false,
        }
    }

    pub fn zip(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "elementwise op: shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Self) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!(
                "axpy: shapes {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + alpha * b;
        }
        Ok(())
    }

    pub fn dot(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("dot: shapes {:?} vs {:?}", self.shape, other.shape)));
        }
        let mut acc = T::zero();
        for (&a, &b) in self.data.iter().zip(&other.data) {
            acc = acc + a * b;
        }
        Ok(acc)
    }

    pub fn sum(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc = acc + v;
        }
        acc
    }

    pub fn mean(&self) -> T {
        if self.data.is_empty() {
            return T::zero();
        }
        self.sum() / T::of_f64(self.data.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        let mut m = T::zero();
        for &v in &self.data {
            if v.abs() > m {
                m = v.abs();
            }
        }
        m
    }

    pub fn norm2(&self) -> T {
        let mut acc = T::zero();
        for &v in &self.data {
            acc = acc + v * v;
        }
        acc.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_f64(&self) -> Tensor<f64> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64()).collect(),
            requires_grad: false,
        }
    }

    pub fn to_f32(&self) -> Tensor<f32> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v.as_f64() as f32).collect(),
            requires_grad: false,
        }
    }
}

/// Relative error |a - b| / max(|a|, |b|, floor), used across the test oracles.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()).max(floor))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_buffer_mismatch_is_rejected() {
        let err = Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn basic_ops() {
        let a = Tensor::<f64>::from_f64_slice(&[3], &[3.0, 4.0, 0.0]).unwrap();
        let b = Tensor::<f64>::from_f64_slice(&[3], &[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 5.0, 1.0]);
        assert_eq!(a.norm2(), 5.0);
        assert_eq!(a.dot(&b).unwrap(), 7.0);
        assert_eq!(b.mean(), 1.0);
    }

    #[test]
    fn gemm_matches_naive() {
        // 2x3 * 3x2
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0];
        let mut c = [0.0f64; 4];
        unsafe { f64::gemm(2, 3, 2, 1.0, a.as_ptr(), b.as_ptr(), 0.0, c.as_mut_ptr()) };
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
    }
}
