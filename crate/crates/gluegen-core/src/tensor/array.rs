//! Dense row-major arrays of rank 1 to 3 and their shapes.
//!
//! `Array` is a plain value container: it carries no gradient machinery.
//! Differentiable values live on the [`Tape`](super::tape::Tape); trainable
//! leaves live in a [`ParameterStore`](super::store::ParameterStore).

use std::fmt;

use crate::error::{Error, Result};

use super::element::Element;

/// Shape of an array: 1 to 3 extents, every extent nonzero.
#[derive(Clone, PartialEq, Eq, Debug, Hash)]
pub struct Shape(Vec<usize>);

impl Shape {
    /// Validate and build a shape from its extents.
    pub fn new(dims: &[usize]) -> Result<Self> {
        if dims.is_empty() || dims.len() > 3 {
            return Err(Error::InvalidShape(format!(
                "rank must be 1..=3, got {}",
                dims.len()
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape(format!("zero extent in {dims:?}")));
        }
        Ok(Shape(dims.to_vec()))
    }

    /// Rank-1 shape helper.
    pub fn vector(n: usize) -> Result<Self> {
        Shape::new(&[n])
    }

    /// Rank-2 shape helper.
    pub fn matrix(rows: usize, cols: usize) -> Result<Self> {
        Shape::new(&[rows, cols])
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    /// Total number of elements.
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }

    /// Extents as `(rows, cols)`; errors when the rank is not 2.
    pub fn rank2(&self) -> Result<(usize, usize)> {
        match self.0.as_slice() {
            &[r, c] => Ok((r, c)),
            _ => Err(Error::InvalidShape(format!("expected rank 2, got {self}"))),
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, "x")?;
            }
            write!(f, "{d}")?;
        }
        write!(f, "]")
    }
}

/// Dense row-major array of `Element`s.
#[derive(Clone, PartialEq, Debug)]
pub struct Array<E> {
    shape: Shape,
    data: Vec<E>,
}

impl<E: Element> Array<E> {
    /// Build from a shape and matching element buffer.
    pub fn from_vec(shape: Shape, data: Vec<E>) -> Result<Self> {
        if shape.numel() != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape} wants {} elements, buffer has {}",
                shape.numel(),
                data.len()
            )));
        }
        Ok(Array { shape, data })
    }

    /// Rank-1 array from a slice.
    pub fn vector(values: &[E]) -> Result<Self> {
        Array::from_vec(Shape::vector(values.len())?, values.to_vec())
    }

    /// Rank-2 array from a row-major slice.
    pub fn matrix(rows: usize, cols: usize, values: &[E]) -> Result<Self> {
        Array::from_vec(Shape::matrix(rows, cols)?, values.to_vec())
    }

    /// All-zero array of the given shape.
    pub fn zeros(shape: Shape) -> Self {
        let n = shape.numel();
        Array { shape, data: vec![E::ZERO; n] }
    }

    /// Constant-filled array of the given shape.
    pub fn full(shape: Shape, value: E) -> Self {
        let n = shape.numel();
        Array { shape, data: vec![value; n] }
    }

    pub fn shape(&self) -> &Shape {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.rank()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_slice(&self) -> &[E] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [E] {
        &mut self.data
    }

    /// Consume into the raw buffer.
    pub fn into_vec(self) -> Vec<E> {
        self.data
    }

    /// Row-major element access for rank-2 arrays (unchecked rank; used on
    /// validated paths).
    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> E {
        let cols = self.shape.dims()[1];
        self.data[i * cols + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: E) {
        let cols = self.shape.dims()[1];
        self.data[i * cols + j] = v;
    }

    /// Elementwise map into a new array of the same shape.
    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// True when every element is finite.
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Convert elements to another precision.
    pub fn cast<F: Element>(&self) -> Array<F> {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| F::from_f64(x.to_f64())).collect(),
        }
    }
}
