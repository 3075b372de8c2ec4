//! Dense rank-4 tensors and the numeric kernels built on them.
//!
//! Every feature map and every convolution kernel in the crate is a
//! [`Tensor4`] laid out row-major in `n -> c -> h -> w` order. Kernels use the
//! same carrier with `(c_out, c_in / groups, K, K)` dims, and fully connected
//! activations use `(n, features, 1, 1)`.

mod conv;
mod gradcheck;
mod ops;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{conv2d_backward, conv2d_forward, ConvGrads};
pub use gradcheck::{finite_diff_grad, max_relative_error};
pub use ops::{
    add, global_avg_pool, global_avg_pool_backward, linear_backward, linear_forward,
    relu_backward, relu_forward, scale, softmax_crossentropy, BatchNorm, BatchNormCache,
    LinearGrads,
};

/// Floating point element type of a tensor.
///
/// Implemented for `f32` (the default training precision) and `f64` (used by
/// the gradient oracles).
pub trait Scalar:
    Float
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    /// Short precision tag recorded in manifests.
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c <- alpha * a.b + beta * c` with explicit row/column strides.
    ///
    /// # Safety
    /// The strides must describe in-bounds views of `a` (m x k), `b` (k x n)
    /// and `c` (m x n).
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Row-major matrix view used by [`gemm`]: `data[i * row_stride + j * col_stride]`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride + 1
        }
    }
}

/// `c (m x n, row-major) <- a . b + beta * c`.
pub(crate) fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, c: &mut [T]) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(b.rows, k, "gemm inner dimension");
    assert!(c.len() >= m * n, "gemm output too small");
    assert!(a.data.len() >= a.max_index() && b.data.len() >= b.max_index());
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = if beta == T::zero() { T::zero() } else { *v * beta };
        }
        return;
    }
    // SAFETY: bounds of all three views were checked above.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense rank-4 array, row-major `n -> c -> h -> w`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor4<T = f32> {
    dims: [usize; 4],
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(dims: [usize; 4], data: Vec<T>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor of dims {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor4 { dims, data })
    }

    pub fn zeros(dims: [usize; 4]) -> Self {
        Self::filled(dims, T::zero())
    }

    pub fn filled(dims: [usize; 4], value: T) -> Self {
        Tensor4 { dims, data: vec![value; dims.iter().product()] }
    }

    pub fn from_fn(dims: [usize; 4], mut f: impl FnMut([usize; 4]) -> T) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for n in 0..dims[0] {
            for c in 0..dims[1] {
                for h in 0..dims[2] {
                    for w in 0..dims[3] {
                        data.push(f([n, c, h, w]));
                    }
                }
            }
        }
        Tensor4 { dims, data }
    }

    /// Independent uniform draws in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(dims: [usize; 4], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| T::of(rng.gen_range(lo..hi)))
            .collect();
        Tensor4 { dims, data }
    }

    /// Independent normal draws with the given standard deviation.
    pub fn normal<R: Rng + ?Sized>(dims: [usize; 4], std: f64, rng: &mut R) -> Self {
        let data = (0..dims.iter().product::<usize>())
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z * std)
            })
            .collect();
        Tensor4 { dims, data }
    }

    pub fn dims(&self) -> [usize; 4] {
        self.dims
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

    /// Number of values in one sample (`c * h * w`).
    pub fn sample_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    pub fn sample(&self, n: usize) -> &[T] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        let [_, cs, hs, ws] = self.dims;
        ((n * cs + c) * hs + h) * ws + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = v;
    }

    /// Same data, new dims of equal volume.
    pub fn reshape(self, dims: [usize; 4]) -> Result<Self> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} into {dims:?}", self.dims)));
        }
        Ok(Tensor4 { dims, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 { dims: self.dims, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        self.expect_dims(other.dims, "max_abs_diff operand")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    pub fn expect_dims(&self, dims: [usize; 4], what: &str) -> Result<()> {
        if self.dims != dims {
            return Err(Error::Shape(format!("{what}: expected {dims:?}, got {:?}", self.dims)));
        }
        Ok(())
    }

    /// Turns NaN/Inf into an error naming the producing operation.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }
}

/// Geometry of a 2-D convolution layer with square kernels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = ConvSpec { c_in, c_out, kernel, stride, padding, groups };
        spec.validate()?;
        Ok(spec)
    }

    /// Dense conv, stride 1, "same" padding.
    pub fn dense(c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Self::new(c_in, c_out, kernel, 1, kernel / 2, 1)
    }

    /// Depthwise conv over `channels`, stride 1, "same" padding.
    pub fn depthwise(channels: usize, kernel: usize) -> Result<Self> {
        Self::new(channels, channels, kernel, 1, kernel / 2, channels)
    }

    pub fn with_stride(mut self, stride: usize) -> Result<Self> {
        self.stride = stride;
        self.validate()?;
        Ok(self)
    }

    pub fn with_padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let ConvSpec { c_in, c_out, kernel, stride, groups, .. } = *self;
        if c_in == 0 || c_out == 0 || kernel == 0 || stride == 0 || groups == 0 {
            return Err(Error::Geometry(format!("all of channels, kernel, stride, groups must be positive: {self:?}")));
        }
        if c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::Geometry(format!(
                "groups {groups} must divide c_in {c_in} and c_out {c_out}"
            )));
        }
        Ok(())
    }

    pub fn is_depthwise(&self) -> bool {
        self.c_in == self.c_out && self.c_in == self.groups
    }

    pub fn is_dense(&self) -> bool {
        self.groups == 1
    }

    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn weight_dims(&self) -> [usize; 4] {
        [self.c_out, self.in_per_group(), self.kernel, self.kernel]
    }

    pub fn weight_len(&self) -> usize {
        self.weight_dims().iter().product()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (hp, wp) = (h + 2 * self.padding, w + 2 * self.padding);
        if hp < self.kernel || wp < self.kernel {
            return Err(Error::Shape(format!(
                "padded input {hp}x{wp} smaller than kernel {}",
                self.kernel
            )));
        }
        Ok(((hp - self.kernel) / self.stride + 1, (wp - self.kernel) / self.stride + 1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor4::<f32>::new([1, 2, 2, 2], vec![0.0; 7]).is_err());
        assert!(Tensor4::<f32>::new([1, 2, 2, 2], vec![0.0; 8]).is_ok());
    }

    #[test]
    fn offsets_are_row_major() {
        let t = Tensor4::<f32>::from_fn([2, 3, 4, 5], |[n, c, h, w]| (n * 1000 + c * 100 + h * 10 + w) as f32);
        assert_eq!(t.at(1, 2, 3, 4), 1234.0);
        assert_eq!(t.data()[t.offset(1, 0, 0, 0)], 1000.0);
        assert_eq!(t.sample(1)[0], 1000.0);
    }

    #[test]
    fn spec_classification() {
        let dw = ConvSpec::depthwise(8, 3).unwrap();
        assert!(dw.is_depthwise() && !dw.is_dense());
        let dense = ConvSpec::dense(4, 8, 3).unwrap();
        assert!(dense.is_dense() && !dense.is_depthwise());
        assert_eq!(dense.weight_dims(), [8, 4, 3, 3]);
        assert!(ConvSpec::new(6, 4, 3, 1, 1, 4).is_err());
        assert!(ConvSpec::new(4, 4, 3, 0, 1, 1).is_err());
    }

    #[test]
    fn output_size_formula() {
        let s = ConvSpec::new(1, 1, 3, 2, 1, 1).unwrap();
        assert_eq!(s.output_hw(32, 32).unwrap(), (16, 16));
        assert_eq!(s.output_hw(5, 7).unwrap(), (3, 4));
        let s = ConvSpec::new(1, 1, 5, 1, 0, 1).unwrap();
        assert!(s.output_hw(3, 3).is_err());
    }

    #[test]
    fn non_finite_is_reported() {
        let t = Tensor4::<f32>::new([1, 1, 1, 2], vec![1.0, f32::NAN]).unwrap();
        assert!(matches!(t.ensure_finite("probe"), Err(Error::NonFinite(_))));
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| v as f64 * 0.5).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(MatRef::row_major(&a, 2, 3), MatRef::row_major(&b, 3, 4), 1.0, &mut c);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = 1.0 + (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum::<f64>();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // a^T (3x2) . a (2x3)
        let mut d = vec![0.0; 9];
        let av = MatRef::row_major(&a, 2, 3);
        gemm(av.t(), av, 0.0, &mut d);
        assert_eq!(d[0], 0.0 * 0.0 + 3.0 * 3.0);
        assert_eq!(d[5], 1.0 * 2.0 + 4.0 * 5.0);
    }
}
