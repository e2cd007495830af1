//! Dense row-major tensors and the floating-point scalar abstraction used by
//! the network. Activations are laid out NCHW, convolution weights OIHW.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of a network.
///
/// `f32` is the production precision (weight archives are float32); `f64`
/// exists for finite-difference gradient checks and exact reproducibility
/// studies.
pub trait Scalar:
    Float + Copy + Default + Debug + Send + Sync + PartialOrd + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    const DTYPE: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_f32(v: f32) -> Self {
        Self::from_f64(v as f64)
    }

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }

    /// `c = alpha * op(a) * op(b) + beta * c` on row-major operands.
    ///
    /// `a` is (m×k) after the optional transpose, `b` is (k×n), `c` is (m×n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // Logical (rows×cols) view over a row-major buffer; transposed buffers
    // are stored (cols×rows).
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "float32";

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn as_f32(self) -> f32 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f32],
        a_trans: bool,
        b: &[f32],
        b_trans: bool,
        c: &mut [f32],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa) = strides(m, k, a_trans);
        let (rsb, csb) = strides(k, n, b_trans);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: bounds checked above; strides describe the row-major layouts.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "float64";

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[f64],
        a_trans: bool,
        b: &[f64],
        b_trans: bool,
        c: &mut [f64],
        accumulate: bool,
    ) {
        assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
        let (rsa, csa) = strides(m, k, a_trans);
        let (rsb, csb) = strides(k, n, b_trans);
        let beta = if accumulate { 1.0 } else { 0.0 };
        // SAFETY: bounds checked above; strides describe the row-major layouts.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape: shape.to_vec(), data }
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

    /// (N, C, H, W) of a rank-4 tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got shape {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| U::from_f64(v.as_f64())).collect() }
    }

    /// Batch item `n` of an NCHW tensor as a flat (C·H·W) slice.
    pub fn item(&self, n: usize) -> &[T] {
        let per = self.data.len() / self.shape[0];
        &self.data[n * per..(n + 1) * per]
    }

    /// Stacks rank-3 (C,H,W) items into one NCHW tensor.
    pub fn stack(items: &[&Tensor<T>]) -> Self {
        assert!(!items.is_empty());
        let inner = items[0].shape.clone();
        let mut data = Vec::with_capacity(items.len() * items[0].len());
        for it in items {
            assert_eq!(it.shape, inner, "stacked tensors must share a shape");
            data.extend_from_slice(&it.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Self { shape, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
