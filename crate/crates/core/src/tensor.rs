//! Dense four-dimensional tensors stored in vec order.
//!
//! A tensor has shape `H x W x C x N` (height, width, channels, batch). Its
//! elements are stored so that the height index varies fastest, then width,
//! then channel, then batch instance. This is the lexicographic order used by
//! the matrix identities of the convolution blocks: reshaping a tensor only
//! changes its logical shape, never the order of its data.

use std::fmt;
use std::io::{Read, Write};
use std::ops::{AddAssign, Index, IndexMut};

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Real scalar type a tensor can hold.
///
/// `f32` is the default compute precision; `f64` is used by gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + 'static
{
    /// Converts from `f64`, rounding to the nearest representable value.
    fn of(v: f64) -> Self;

    fn to_f64_lossless(self) -> f64;

    /// `C <- alpha * A * B + beta * C` on strided row/column layouts.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`. Strides are given as
    /// (row stride, column stride).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

macro_rules! check_extent {
    ($buf:expr, $rows:expr, $cols:expr, $strides:expr) => {
        if $rows > 0 && $cols > 0 {
            let last = ($rows - 1) * $strides.0 + ($cols - 1) * $strides.1;
            assert!(last < $buf.len(), "gemm operand out of bounds");
        }
    };
}

impl Scalar for f32 {
    fn of(v: f64) -> Self {
        v as f32
    }

    fn to_f64_lossless(self) -> f64 {
        self as f64
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        a_strides: (usize, usize),
        b: &[f32],
        b_strides: (usize, usize),
        beta: f32,
        c: &mut [f32],
        c_strides: (usize, usize),
    ) {
        check_extent!(a, m, k, a_strides);
        check_extent!(b, k, n, b_strides);
        check_extent!(c, m, n, c_strides);
        // SAFETY: extents checked above, slices outlive the call.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                a_strides.0 as isize,
                a_strides.1 as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                beta,
                c.as_mut_ptr(),
                c_strides.0 as isize,
                c_strides.1 as isize,
            )
        }
    }
}

impl Scalar for f64 {
    fn of(v: f64) -> Self {
        v
    }

    fn to_f64_lossless(self) -> f64 {
        self
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        a_strides: (usize, usize),
        b: &[f64],
        b_strides: (usize, usize),
        beta: f64,
        c: &mut [f64],
        c_strides: (usize, usize),
    ) {
        check_extent!(a, m, k, a_strides);
        check_extent!(b, k, n, b_strides);
        check_extent!(c, m, n, c_strides);
        // SAFETY: extents checked above, slices outlive the call.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                a_strides.0 as isize,
                a_strides.1 as isize,
                b.as_ptr(),
                b_strides.0 as isize,
                b_strides.1 as isize,
                beta,
                c.as_mut_ptr(),
                c_strides.0 as isize,
                c_strides.1 as isize,
            )
        }
    }
}

/// Tensor dimensions `(H, W, C, N)`. Every dimension is at least one.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape(pub [usize; 4]);

impl Shape {
    pub fn new(h: usize, w: usize, c: usize, n: usize) -> Self {
        Shape([h, w, c, n])
    }

    /// Builds a shape from up to four leading dimensions; missing trailing
    /// dimensions are one.
    pub fn from_dims(dims: &[usize]) -> Result<Self> {
        if dims.len() > 4 {
            return Err(Error::InvalidParam(format!(
                "tensors have at most 4 dimensions, got {}",
                dims.len()
            )));
        }
        let mut s = [1usize; 4];
        s[..dims.len()].copy_from_slice(dims);
        if s.contains(&0) {
            return Err(Error::InvalidParam(format!(
                "zero-sized dimension in {dims:?}"
            )));
        }
        Ok(Shape(s))
    }

    pub fn h(&self) -> usize {
        self.0[0]
    }
    pub fn w(&self) -> usize {
        self.0[1]
    }
    pub fn c(&self) -> usize {
        self.0[2]
    }
    pub fn n(&self) -> usize {
        self.0[3]
    }

    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Elements in one batch instance (`H * W * C`).
    pub fn image_len(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    /// Linear offset of `(i, j, c, n)` (zero-based) in vec order.
    #[inline]
    pub fn offset(&self, i: usize, j: usize, c: usize, n: usize) -> usize {
        let [h, w, ch, _] = self.0;
        i + h * (j + w * (c + ch * n))
    }

    /// Inverse of [`Shape::offset`].
    pub fn unravel(&self, mut k: usize) -> (usize, usize, usize, usize) {
        let [h, w, c, _] = self.0;
        let i = k % h;
        k /= h;
        let j = k % w;
        k /= w;
        let ch = k % c;
        (i, j, ch, k / c)
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [h, w, c, n] = self.0;
        write!(f, "{h}x{w}x{c}x{n}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// A dense `H x W x C x N` array in vec order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    pub fn filled(shape: Shape, v: T) -> Self {
        Tensor {
            shape,
            data: vec![v; shape.numel()],
        }
    }

    pub fn ones(shape: Shape) -> Self {
        Self::filled(shape, T::one())
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::ShapeMismatch(format!(
                "{} elements do not fill a {shape} tensor",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Convenience constructor from `f64` values.
    pub fn from_f64(shape: Shape, data: &[f64]) -> Result<Self> {
        Self::from_vec(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    /// A `1 x 1 x 1 x 1` tensor.
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: Shape::new(1, 1, 1, 1),
            data: vec![v],
        }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n() {
            for c in 0..shape.c() {
                for j in 0..shape.w() {
                    for i in 0..shape.h() {
                        data.push(f(i, j, c, n));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Elements in vec order.
    pub fn vec(&self) -> &[T] {
        &self.data
    }

    pub fn vec_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize, c: usize, n: usize) -> T {
        self.data[self.shape.offset(i, j, c, n)]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize, c: usize, n: usize) -> &mut T {
        let k = self.shape.offset(i, j, c, n);
        &mut self.data[k]
    }

    /// Data of batch instance `n` in vec order.
    pub fn image(&self, n: usize) -> &[T] {
        let len = self.shape.image_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn image_mut(&mut self, n: usize) -> &mut [T] {
        let len = self.shape.image_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Sum over all elements of `self ⊙ other`.
    pub fn inner(&self, other: &Tensor<T>) -> Result<T> {
        self.expect_shape(other.shape, "inner product")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }

    /// Same data, new logical shape.
    pub fn reshape(self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {} into {shape}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape,
            data: self.data,
        })
    }

    pub fn reshaped(&self, shape: Shape) -> Result<Self> {
        self.clone().reshape(shape)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor<T>, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.expect_shape(other.shape, "elementwise operation")?;
        Ok(Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_shape(other.shape, "accumulation")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Tensor<T>) -> Result<()> {
        self.expect_shape(other.shape, "accumulation")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: T) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64_lossless()))
                .collect(),
        }
    }

    /// Instances `[start, start + count)` along the batch dimension.
    pub fn batch_slice(&self, start: usize, count: usize) -> Result<Self> {
        if start + count > self.shape.n() || count == 0 {
            return Err(Error::ShapeMismatch(format!(
                "batch slice {start}..{} out of range for {}",
                start + count,
                self.shape
            )));
        }
        let len = self.shape.image_len();
        let [h, w, c, _] = self.shape.0;
        Ok(Tensor {
            shape: Shape::new(h, w, c, count),
            data: self.data[start * len..(start + count) * len].to_vec(),
        })
    }

    /// Gathers the listed batch instances into a new tensor.
    pub fn gather_batch(&self, indices: &[usize]) -> Result<Self> {
        let len = self.shape.image_len();
        let [h, w, c, n] = self.shape.0;
        let mut data = Vec::with_capacity(indices.len() * len);
        for &k in indices {
            if k >= n {
                return Err(Error::ShapeMismatch(format!(
                    "batch index {k} out of range for {}",
                    self.shape
                )));
            }
            data.extend_from_slice(&self.data[k * len..(k + 1) * len]);
        }
        Tensor::from_vec(Shape::new(h, w, c, indices.len()), data)
    }

    pub fn expect_shape(&self, shape: Shape, what: &str) -> Result<()> {
        if self.shape != shape {
            return Err(Error::ShapeMismatch(format!(
                "{what}: expected {shape}, got {}",
                self.shape
            )));
        }
        Ok(())
    }
}

impl<T: Scalar> Index<usize> for Tensor<T> {
    type Output = T;
    fn index(&self, k: usize) -> &T {
        &self.data[k]
    }
}

impl<T: Scalar> IndexMut<usize> for Tensor<T> {
    fn index_mut(&mut self, k: usize) -> &mut T {
        &mut self.data[k]
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

/// Writes the raw blob encoding: four little-endian `u64` dims `(H, W, C, N)`
/// then the elements as little-endian `f32` in vec order.
pub fn write_blob<T: Scalar, W: Write>(t: &Tensor<T>, mut out: W) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + 4 * t.numel());
    for d in t.shape.0 {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in &t.data {
        buf.extend_from_slice(&(v.to_f64_lossless() as f32).to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a tensor written by [`write_blob`].
pub fn read_blob<T: Scalar, R: Read>(mut input: R) -> Result<Tensor<T>> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_blob(&bytes)
}

pub fn encode_blob<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_blob(t, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

pub fn decode_blob<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    if bytes.len() < 32 {
        return Err(Error::Format(format!(
            "tensor blob truncated: {} header bytes",
            bytes.len()
        )));
    }
    let mut dims = [0usize; 4];
    for (k, d) in dims.iter_mut().enumerate() {
        let raw = u64::from_le_bytes(bytes[8 * k..8 * k + 8].try_into().unwrap());
        *d = usize::try_from(raw)
            .map_err(|_| Error::Format(format!("tensor blob dimension {raw} too large")))?;
    }
    let shape =
        Shape::from_dims(&dims).map_err(|e| Error::Format(format!("tensor blob header: {e}")))?;
    let body = &bytes[32..];
    let expected = shape
        .0
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format("tensor blob dimensions overflow".into()))?;
    if body.len() != expected {
        return Err(Error::Format(format!(
            "tensor blob for {shape} needs {expected} data bytes, found {}",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Column-major matrix view helper used by the im2row formulation.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    pub rows: usize,
    pub cols: usize,
    /// Column-major storage, `rows * cols` entries.
    pub data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r + self.rows * c]
    }

    #[inline]
    pub fn get_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r + self.rows * c]
    }

    pub fn inner(&self, other: &Matrix<T>) -> Result<T> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch(format!(
                "matrix inner product: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(T::zero(), |acc, (&a, &b)| acc + a * b))
    }
}
