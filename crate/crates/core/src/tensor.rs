//! Dense NCHW tensors.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Extents of a 4-D tensor in (batch, channels, height, width) order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    /// Elements in one spatial plane.
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_channels(self, c: usize) -> Self {
        Shape { c, ..self }
    }

    pub fn with_spatial(self, h: usize, w: usize) -> Self {
        Shape { h, w, ..self }
    }

    /// Shape error unless every extent is at least 1.
    pub fn validate(&self) -> Result<()> {
        if self.dims().contains(&0) {
            return Err(Error::shape(format!("all extents must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl From<[usize; 4]> for Shape {
    fn from(d: [usize; 4]) -> Self {
        Shape::new(d[0], d[1], d[2], d[3])
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// Row-major NCHW tensor. Values are owned; slicing copies.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Tensor filled with a constant.
    pub fn full(shape: impl Into<Shape>, value: T) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        Ok(Tensor {
            shape,
            data: vec![value; shape.numel()],
        })
    }

    pub fn zeros(shape: impl Into<Shape>) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    /// Tensor from a row-major value list whose length must match the shape.
    pub fn from_vec(shape: impl Into<Shape>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if data.len() != shape.numel() {
            return Err(Error::Size {
                expected: shape.numel(),
                actual: data.len(),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Allocation for kernels that overwrite every element.
    pub(crate) fn zeroed_unchecked(shape: Shape) -> Self {
        Tensor {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    /// Channel vector of length `c`, stored with shape `(c,1,1,1)`.
    pub fn vector(values: Vec<T>) -> Result<Self> {
        let c = values.len();
        Self::from_vec([c, 1, 1, 1], values)
    }

    pub fn shape(&self) -> Shape {
        self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: T) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// Contiguous `h*w` plane of one (batch, channel) pair.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let start = self.offset(n, c, 0, 0);
        &self.data[start..start + self.shape.plane()]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let start = self.offset(n, c, 0, 0);
        let len = self.shape.plane();
        &mut self.data[start..start + len]
    }

    /// Same data under a different shape with the same element count.
    pub fn reshape(self, shape: impl Into<Shape>) -> Result<Self> {
        let shape = shape.into();
        shape.validate()?;
        if shape.numel() != self.data.len() {
            return Err(Error::Size {
                expected: shape.numel(),
                actual: self.data.len(),
            });
        }
        Ok(Tensor { shape, data: self.data })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// Elementwise conversion to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::from_f64_lossy(x.to_f64_lossy())).collect(),
        }
    }

    /// Largest absolute elementwise difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<T> {
        if self.shape != other.shape {
            return Err(Error::shape(format!(
                "cannot compare {} with {}",
                self.shape, other.shape
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(T::zero(), T::max))
    }

    /// Copy of channels `[lo, hi)`.
    pub fn slice_channels(&self, lo: usize, hi: usize) -> Result<Self> {
        if lo >= hi || hi > self.shape.c {
            return Err(Error::Index(format!(
                "channel range [{lo}, {hi}) invalid for {} channels",
                self.shape.c
            )));
        }
        let shape = self.shape.with_channels(hi - lo);
        let plane = self.shape.plane();
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..self.shape.n {
            let start = self.offset(n, lo, 0, 0);
            data.extend_from_slice(&self.data[start..start + (hi - lo) * plane]);
        }
        Ok(Tensor { shape, data })
    }

    /// Splits the leading extent into `parts` equal pieces (for weight tensors
    /// this partitions output channels).
    pub fn split_leading(&self, parts: usize) -> Result<Vec<Self>> {
        if parts == 0 || !self.shape.n.is_multiple_of(parts) {
            return Err(Error::Index(format!(
                "cannot split leading extent {} into {parts} parts",
                self.shape.n
            )));
        }
        let per = self.shape.n / parts;
        let chunk = per * self.shape.c * self.shape.plane();
        Ok(self
            .data
            .chunks(chunk)
            .map(|d| Tensor {
                shape: Shape { n: per, ..self.shape },
                data: d.to_vec(),
            })
            .collect())
    }

    /// Inverse of [`split_leading`](Self::split_leading).
    pub fn concat_leading(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = first.shape;
        if parts
            .iter()
            .any(|p| (p.shape.c, p.shape.h, p.shape.w) != (base.c, base.h, base.w))
        {
            return Err(Error::shape("leading concat requires equal trailing extents"));
        }
        let n = parts.iter().map(|p| p.shape.n).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Tensor {
            shape: Shape { n, ..base },
            data,
        })
    }

    /// Channel-wise concatenation in argument order.
    pub fn concat_channels(parts: &[&Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::shape("concat of zero tensors"))?;
        let base = first.shape;
        for p in parts {
            let s = p.shape;
            if (s.n, s.h, s.w) != (base.n, base.h, base.w) {
                return Err(Error::shape(format!("concat mismatch: {} vs {}", base, s)));
            }
        }
        let c = parts.iter().map(|p| p.shape.c).sum();
        let shape = base.with_channels(c);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..base.n {
            for p in parts {
                let chunk = p.shape.c * p.shape.plane();
                data.extend_from_slice(&p.data[n * chunk..(n + 1) * chunk]);
            }
        }
        Ok(Tensor { shape, data })
    }
}
