//! Dense NCHW real tensors and the quaternion view over them.
//!
//! A quaternion feature map with `C` quaternion channels is stored as a real
//! tensor with `4·C` channels per batch item: channels `0..C` hold the real
//! parts, `C..2C` the i-parts, `2C..3C` the j-parts and `3C..4C` the k-parts.
//! Every kernel in the crate relies on this component-planar order.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};
use crate::quaternion::Quaternion;

/// Floating point element type usable by the tensor kernels.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + Send
    + Sync
    + 'static
{
    /// `c = alpha·op(a)·op(b) + beta·c` for row-major `a` (m×k), `b` (k×n), `c` (m×n).
    /// `op` transposes the stored matrix when the corresponding flag is set; the
    /// stored matrix then has shape k×m (resp. n×k).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every Real")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    // (row stride, col stride) of op(M) where M is stored row-major.
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                // SAFETY: bounds are asserted above and the strides describe
                // matrices that lie entirely inside the given slices.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Shape of a 4-D tensor: batch, channels, height, width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { n: 1, c: 1, h: 1, w: 1 };

    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}

/// Dense row-major NCHW tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.len()],
        }
    }

    pub fn full(shape: Shape, v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.len()],
        }
    }

    pub fn scalar(v: T) -> Self {
        Tensor::full(Shape::SCALAR, v)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "buffer of {} values does not fill shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape,
            data: (0..shape.len()).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    /// Returns the reshaped tensor; element order is unchanged.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::from_vec(shape, self.data)
    }

    /// Contiguous `h·w` slice of one channel plane.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Horizontal mirror of every plane.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        let w = self.shape.w;
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        out
    }
}

/// Batched quaternion feature map in component-planar layout.
#[derive(Debug, Clone, PartialEq)]
pub struct QTensor<T> {
    inner: Tensor<T>,
}

impl<T: Real> QTensor<T> {
    pub fn zeros(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        QTensor {
            inner: Tensor::zeros(Shape::new(batch, 4 * channels, height, width)),
        }
    }

    /// Wraps a real tensor whose channel count is a multiple of four.
    pub fn from_real(t: Tensor<T>) -> Result<Self> {
        if !t.shape().c.is_multiple_of(4) {
            return Err(Error::Shape(format!(
                "real tensor {} has {} channels, not a multiple of 4",
                t.shape(),
                t.shape().c
            )));
        }
        Ok(QTensor { inner: t })
    }

    /// Packs per-component arrays, each laid out as `[batch][channel][h][w]`,
    /// into the planar quaternion layout.
    pub fn pack(
        batch: usize,
        channels: usize,
        height: usize,
        width: usize,
        components: [&[T]; 4],
    ) -> Result<Self> {
        let per = batch * channels * height * width;
        if components.iter().any(|c| c.len() != per) {
            return Err(Error::Shape(format!(
                "each component must hold {per} values"
            )));
        }
        let mut q = QTensor::zeros(batch, channels, height, width);
        let plane = height * width;
        for (comp, src) in components.iter().enumerate() {
            for b in 0..batch {
                for c in 0..channels {
                    let s = (b * channels + c) * plane;
                    q.component_plane_mut(b, comp, c)
                        .copy_from_slice(&src[s..s + plane]);
                }
            }
        }
        Ok(q)
    }

    /// Inverse of [`QTensor::pack`].
    pub fn unpack(&self) -> [Vec<T>; 4] {
        let mut out: [Vec<T>; 4] = Default::default();
        for (comp, dst) in out.iter_mut().enumerate() {
            for b in 0..self.batch() {
                for c in 0..self.channels() {
                    dst.extend_from_slice(self.component_plane(b, comp, c));
                }
            }
        }
        out
    }

    pub fn batch(&self) -> usize {
        self.inner.shape().n
    }

    /// Quaternion channel count.
    pub fn channels(&self) -> usize {
        self.inner.shape().c / 4
    }

    pub fn height(&self) -> usize {
        self.inner.shape().h
    }

    pub fn width(&self) -> usize {
        self.inner.shape().w
    }

    pub fn real(&self) -> &Tensor<T> {
        &self.inner
    }

    pub fn into_real(self) -> Tensor<T> {
        self.inner
    }

    pub fn component_plane(&self, b: usize, comp: usize, c: usize) -> &[T] {
        self.inner.plane(b, comp * self.channels() + c)
    }

    pub fn component_plane_mut(&mut self, b: usize, comp: usize, c: usize) -> &mut [T] {
        let ch = self.channels();
        self.inner.plane_mut(b, comp * ch + c)
    }

    pub fn get(&self, b: usize, c: usize, y: usize, x: usize) -> Quaternion<T> {
        let ch = self.channels();
        let t = &self.inner;
        Quaternion::new(
            t.at(b, c, y, x),
            t.at(b, ch + c, y, x),
            t.at(b, 2 * ch + c, y, x),
            t.at(b, 3 * ch + c, y, x),
        )
    }

    pub fn set(&mut self, b: usize, c: usize, y: usize, x: usize, q: Quaternion<T>) {
        let ch = self.channels();
        for (comp, v) in q.components().into_iter().enumerate() {
            let i = self.inner.index(b, comp * ch + c, y, x);
            self.inner.data_mut()[i] = v;
        }
    }
}
