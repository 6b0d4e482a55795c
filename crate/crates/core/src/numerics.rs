//! Dense row-major tensors and the scalar abstraction shared by every layer.
//!
//! Image batches use the `(n, y, x, c)` layout throughout. There is no
//! broadcasting: binary operations require identical shapes.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use crate::error::{Error, Result};

/// Scalar element type.
///
/// `f32` is used for training and `f64` for gradient checking. The trait is
/// open so that tests can plug in instrumented scalars; convolution and dense
/// kernels route every multiply-accumulate through [`Real::mac`].
pub trait Real:
    Copy
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + PartialOrd
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    fn zero() -> Self;
    fn one() -> Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn sqrt(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn erf(self) -> Self;
    fn is_finite(self) -> bool;

    #[inline(always)]
    fn mac(acc: Self, a: Self, b: Self) -> Self {
        acc + a * b
    }

    #[inline(always)]
    fn max(self, other: Self) -> Self {
        if other > self {
            other
        } else {
            self
        }
    }
}

impl Real for f32 {
    #[inline(always)]
    fn zero() -> Self {
        0.0
    }
    #[inline(always)]
    fn one() -> Self {
        1.0
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f32::sqrt(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f32::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f32::ln(self)
    }
    #[inline(always)]
    fn erf(self) -> Self {
        libm::erff(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f32::is_finite(self)
    }
}

impl Real for f64 {
    #[inline(always)]
    fn zero() -> Self {
        0.0
    }
    #[inline(always)]
    fn one() -> Self {
        1.0
    }
    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline(always)]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline(always)]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline(always)]
    fn erf(self) -> Self {
        libm::erf(self)
    }
    #[inline(always)]
    fn is_finite(self) -> bool {
        f64::is_finite(self)
    }
}

/// Tensor extents. Non-empty, every extent at least one.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    pub fn new(dims: impl Into<Vec<usize>>) -> Result<Self> {
        let dims = dims.into();
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidShape(dims));
        }
        Ok(Shape(dims))
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn size(&self) -> usize {
        self.0.iter().product()
    }

    /// Row-major strides in elements.
    pub fn strides(&self) -> Vec<usize> {
        let mut strides = vec![1; self.0.len()];
        for i in (0..self.0.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * self.0[i + 1];
        }
        strides
    }

    pub fn offset(&self, coords: &[usize]) -> Option<usize> {
        if coords.len() != self.0.len() {
            return None;
        }
        let mut off = 0;
        for (&c, &d) in coords.iter().zip(&self.0) {
            if c >= d {
                return None;
            }
            off = off * d + c;
        }
        Some(off)
    }

    pub fn coords(&self, mut offset: usize) -> Vec<usize> {
        let mut out = vec![0; self.0.len()];
        for i in (0..self.0.len()).rev() {
            out[i] = offset % self.0[i];
            offset /= self.0[i];
        }
        out
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
}

impl<T: Real> Tensor<T> {
    pub fn fill(dims: &[usize], value: T) -> Result<Self> {
        let shape = Shape::new(dims)?;
        let data = vec![value; shape.size()];
        Ok(Tensor { shape, data })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::fill(dims, T::zero())
    }

    pub fn from_vec(dims: &[usize], data: Vec<T>) -> Result<Self> {
        let shape = Shape::new(dims)?;
        if shape.size() != data.len() {
            return Err(Error::Layer(format!(
                "buffer of {} elements cannot have shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::zero(); self.data.len()],
        }
    }

    pub fn ones_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![T::one(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn dims(&self) -> &[usize] {
        self.shape.dims()
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

    pub fn get(&self, coords: &[usize]) -> Option<T> {
        self.shape.offset(coords).map(|i| self.data[i])
    }

    pub fn set(&mut self, coords: &[usize], value: T) -> Result<()> {
        let i = self.shape.offset(coords).ok_or_else(|| {
            Error::Layer(format!("coordinates {coords:?} outside {}", self.shape))
        })?;
        self.data[i] = value;
        Ok(())
    }

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Tensor::from_vec(dims, self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &v| acc + v)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_same_shape(&self, other: &Tensor<T>) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn elementwise(op: ElementwiseOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Self> {
        a.ensure_same_shape(b)?;
        let f = match op {
            ElementwiseOp::Add => |x: T, y: T| x + y,
            ElementwiseOp::Sub => |x: T, y: T| x - y,
            ElementwiseOp::Mul => |x: T, y: T| x * y,
        };
        Ok(Tensor {
            shape: a.shape.clone(),
            data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Self> {
        Self::elementwise(ElementwiseOp::Add, self, other)
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Self> {
        Self::elementwise(ElementwiseOp::Sub, self, other)
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Self> {
        Self::elementwise(ElementwiseOp::Mul, self, other)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.ensure_same_shape(other)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Arithmetic mean over `axes`; reduced axes are removed. Reducing every
    /// axis yields a one-element tensor of shape `[1]`.
    pub fn reduce_mean(&self, axes: &[usize]) -> Result<Self> {
        let rank = self.shape.rank();
        let mut reduced = vec![false; rank];
        for &axis in axes {
            if axis >= rank {
                return Err(Error::InvalidAxis { axis, rank });
            }
            if reduced[axis] {
                return Err(Error::DuplicateAxis(axis));
            }
            reduced[axis] = true;
        }
        if axes.is_empty() {
            return Ok(self.clone());
        }

        let dims = self.shape.dims();
        let mut out_dims: Vec<usize> = (0..rank).filter(|&i| !reduced[i]).map(|i| dims[i]).collect();
        if out_dims.is_empty() {
            out_dims.push(1);
        }
        let count: usize = (0..rank).filter(|&i| reduced[i]).map(|i| dims[i]).product();

        // Output stride of each input axis (zero for reduced axes).
        let mut out_stride = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..rank).rev() {
            if !reduced[i] {
                out_stride[i] = acc;
                acc *= dims[i];
            }
        }

        let mut sums = vec![T::zero(); out_dims.iter().product()];
        let mut coords = vec![0usize; rank];
        for &v in &self.data {
            let o: usize = coords.iter().zip(&out_stride).map(|(c, s)| c * s).sum();
            sums[o] += v;
            for i in (0..rank).rev() {
                coords[i] += 1;
                if coords[i] < dims[i] {
                    break;
                }
                coords[i] = 0;
            }
        }
        let n = T::from_f64(count as f64);
        for s in &mut sums {
            *s = *s / n;
        }
        Tensor::from_vec(&out_dims, sums)
    }
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>>
where
    F: FnMut(&Tensor<f64>) -> f64,
{
    let mut probe = x.clone();
    let mut grad = x.zeros_like();
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + h;
        let up = f(&probe);
        probe.data[i] = orig - h;
        let down = f(&probe);
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} during finite differencing"
            )));
        }
        grad.data[i] = (up - down) / (2.0 * h);
    }
    Ok(grad)
}
