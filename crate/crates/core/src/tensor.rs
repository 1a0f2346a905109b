//! Flat, row-major containers for image batches and small matrices.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel-major image shape (C × H × W). Flat feature vectors use `1 × 1 × d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width }
    }

    pub const fn flat(dim: usize) -> Self {
        Self { channels: 1, height: 1, width: dim }
    }

    pub const fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A batch of N images stored contiguously.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: Scalar> ImageBatch<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        let n = shape.numel();
        if n == 0 {
            return Err(Error::input(format!("image shape {shape} has no elements")));
        }
        if !data.len().is_multiple_of(n) {
            return Err(Error::shape(format!("a multiple of {n} values"), format!("{} values", data.len())));
        }
        Ok(Self { shape, data })
    }

    pub fn empty(shape: Shape) -> Self {
        Self { shape, data: Vec::new() }
    }

    pub fn zeros(shape: Shape, len: usize) -> Self {
        Self { shape, data: vec![T::zero(); shape.numel() * len] }
    }

    pub fn from_images<'a, I>(shape: Shape, images: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [T]>,
    {
        let mut data = Vec::new();
        for img in images {
            if img.len() != shape.numel() {
                return Err(Error::shape(shape.numel(), img.len()));
            }
            data.extend_from_slice(img);
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.shape.numel()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn image(&self, i: usize) -> &[T] {
        let n = self.shape.numel();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [T] {
        let n = self.shape.numel();
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.shape.numel())
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn push(&mut self, image: &[T]) -> Result<()> {
        if image.len() != self.shape.numel() {
            return Err(Error::shape(self.shape.numel(), image.len()));
        }
        self.data.extend_from_slice(image);
        Ok(())
    }

    /// Copies the listed images, in order, into a new batch.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.shape.numel());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self { shape: self.shape, data }
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> ImageBatch<U> {
        ImageBatch { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense row-major matrix (rows = samples).
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }
}

pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub(crate) fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}
