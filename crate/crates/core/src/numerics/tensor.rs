use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{MuseError, Result};

/// `[batch, heads, n, d]` extents of a [`Tensor4`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape4 {
    pub batch: usize,
    pub heads: usize,
    pub n: usize,
    pub d: usize,
}

impl Shape4 {
    pub fn new(batch: usize, heads: usize, n: usize, d: usize) -> Self {
        Self { batch, heads, n, d }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.heads * self.n * self.d
    }

    /// Number of independent (batch, head) slices.
    pub fn slices(&self) -> usize {
        self.batch * self.heads
    }

    pub fn head_len(&self) -> usize {
        self.n * self.d
    }

    pub fn with_n(self, n: usize) -> Self {
        Self { n, ..self }
    }
}

impl std::fmt::Display for Shape4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.batch, self.heads, self.n, self.d)
    }
}

/// Dense row-major `[batch, heads, n, d]` array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4<T> {
    shape: Shape4,
    data: Vec<T>,
}

impl<T: Scalar> Tensor4<T> {
    pub fn new(shape: Shape4, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(MuseError::shape(format!(
                "tensor {shape} needs {} scalars, got {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape4) -> Self {
        Self {
            shape,
            data: vec![T::zero(); shape.numel()],
        }
    }

    /// Assembles a tensor from per-(batch, head) slices in row-major slice order.
    pub fn from_heads(shape: Shape4, heads: impl IntoIterator<Item = Vec<T>>) -> Result<Self> {
        let mut data = Vec::with_capacity(shape.numel());
        let mut count = 0;
        for h in heads {
            if h.len() != shape.head_len() {
                return Err(MuseError::shape(format!(
                    "head slice of length {} in tensor {shape}",
                    h.len()
                )));
            }
            data.extend_from_slice(&h);
            count += 1;
        }
        if count != shape.slices() {
            return Err(MuseError::shape(format!(
                "{count} head slices for tensor {shape}"
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape4 {
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

    /// The `n × d` slice of head `slice = batch * heads + head`.
    pub fn slice(&self, slice: usize) -> &[T] {
        let len = self.shape.head_len();
        &self.data[slice * len..(slice + 1) * len]
    }

    pub fn head(&self, batch: usize, head: usize) -> &[T] {
        self.slice(batch * self.shape.heads + head)
    }

    pub fn head_mut(&mut self, batch: usize, head: usize) -> &mut [T] {
        let len = self.shape.head_len();
        let s = batch * self.shape.heads + head;
        &mut self.data[s * len..(s + 1) * len]
    }

    pub fn get(&self, b: usize, h: usize, i: usize, j: usize) -> T {
        let Shape4 { heads, n, d, .. } = self.shape;
        self.data[((b * heads + h) * n + i) * d + j]
    }

    /// Copy of token rows `start..end` of every head.
    pub fn rows(&self, start: usize, end: usize) -> Self {
        let d = self.shape.d;
        let mut data = Vec::with_capacity(self.shape.slices() * (end - start) * d);
        for s in 0..self.shape.slices() {
            data.extend_from_slice(&self.slice(s)[start * d..end * d]);
        }
        Self {
            shape: self.shape.with_n(end - start),
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn scaled(&self, factor: T) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&x| x * factor).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor4<U> {
        Tensor4 {
            shape: self.shape,
            data: self.data.iter().map(|&x| U::of(x.as_f64())).collect(),
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|&x| x.as_f64() * x.as_f64()).sum()
    }
}
