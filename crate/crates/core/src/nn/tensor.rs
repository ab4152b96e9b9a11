use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

/// Floating-point element type. Training runs in `f32`, gradient checks in
/// `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + 'static
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Dense row-major tensor. Almost everything here is 2-D, `[rows][cols]`,
/// with rows indexing sequence positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        Self::from_vec(&[rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.shape.len(), 2);
        self.shape[1]
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// Rows `start..end` as a new tensor.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        let c = self.cols();
        Self {
            shape: vec![end - start, c],
            data: self.data[start * c..end * c].to_vec(),
        }
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(parts: &[&Tensor<T>]) -> Self {
        let c = parts[0].cols();
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            debug_assert_eq!(p.cols(), c);
            data.extend_from_slice(&p.data);
        }
        Self {
            shape: vec![data.len() / c, c],
            data,
        }
    }

    /// Side-by-side concatenation of two 2-D tensors with equal rows.
    pub fn concat_cols(a: &Tensor<T>, b: &Tensor<T>) -> Self {
        debug_assert_eq!(a.rows(), b.rows());
        let (ca, cb) = (a.cols(), b.cols());
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        for r in 0..a.rows() {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Self {
            shape: vec![a.rows(), ca + cb],
            data,
        }
    }

    /// Inverse of [`Tensor::concat_cols`]: splits after column `at`.
    pub fn split_cols(&self, at: usize) -> (Self, Self) {
        let c = self.cols();
        let rows = self.rows();
        let mut a = Vec::with_capacity(rows * at);
        let mut b = Vec::with_capacity(rows * (c - at));
        for r in 0..rows {
            let row = self.row(r);
            a.extend_from_slice(&row[..at]);
            b.extend_from_slice(&row[at..]);
        }
        (
            Self {
                shape: vec![rows, at],
                data: a,
            },
            Self {
                shape: vec![rows, c - at],
                data: b,
            },
        )
    }

    /// Rows in reverse order.
    pub fn reversed_rows(&self) -> Self {
        let mut out = Self::zeros(&self.shape);
        let n = self.rows();
        for r in 0..n {
            out.row_mut(n - 1 - r).copy_from_slice(self.row(r));
        }
        out
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numerical(format!(
                "{what}: non-finite value {:?} at flat index {i} of shape {:?}",
                self.data[i], self.shape
            ))),
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    s
}

/// `y += alpha * x`.
#[inline]
pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `y = x Wᵀ (+ b)` for `x: [n][in]`, `w: [out][in]`.
pub fn matmul_t<T: Scalar>(x: &Tensor<T>, w: &[T], out_dim: usize, bias: Option<&[T]>) -> Tensor<T> {
    let in_dim = x.cols();
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut y = Tensor::zeros(&[x.rows(), out_dim]);
    for r in 0..x.rows() {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        for (o, yo) in yr.iter_mut().enumerate() {
            *yo = dot(xr, &w[o * in_dim..(o + 1) * in_dim]);
        }
        if let Some(b) = bias {
            for (yo, &bo) in yr.iter_mut().zip(b) {
                *yo += bo;
            }
        }
    }
    y
}

/// Backward of [`matmul_t`]: returns `gx = gy W` and accumulates
/// `gw += gyᵀ x`.
pub fn matmul_t_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &[T],
    gy: &Tensor<T>,
    gw: Option<&mut [T]>,
    need_gx: bool,
) -> Option<Tensor<T>> {
    let in_dim = x.cols();
    let out_dim = gy.cols();
    if let Some(gw) = gw {
        for r in 0..x.rows() {
            let xr = x.row(r);
            for (o, &g) in gy.row(r).iter().enumerate() {
                if g != T::zero() {
                    axpy(g, xr, &mut gw[o * in_dim..(o + 1) * in_dim]);
                }
            }
        }
    }
    need_gx.then(|| {
        let mut gx = Tensor::zeros(&[x.rows(), in_dim]);
        for r in 0..x.rows() {
            let gr = gx.row_mut(r);
            for (o, &g) in gy.row(r).iter().enumerate() {
                if g != T::zero() {
                    axpy(g, &w[o * in_dim..(o + 1) * in_dim], gr);
                }
            }
        }
        debug_assert_eq!(gy.cols(), out_dim);
        gx
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot_handles_remainders() {
        let a: Vec<f64> = (0..7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), (0..7).map(|i| f64::from(i * i)).sum::<f64>());
    }

    #[test]
    fn concat_and_split_are_inverse() {
        let a = Tensor::matrix(2, 2, vec![1.0f64, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::matrix(2, 1, vec![5.0, 6.0]).unwrap();
        let c = Tensor::concat_cols(&a, &b);
        assert_eq!(c.data(), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let (x, y) = c.split_cols(2);
        assert_eq!((x, y), (a, b));
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor::matrix(1, 2, vec![1.0f32, f32::NAN]).unwrap();
        assert!(t.ensure_finite("probe").unwrap_err().to_string().contains("probe"));
        assert!(Tensor::<f32>::from_vec(&[2, 2], vec![0.0; 3]).is_err());
    }
}
