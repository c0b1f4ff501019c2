//! Dense n-dimensional array, row-major with the last axis fastest.
//!
//! This is the carrier for images, activations, weights and gradients.
//! Shapes are validated on construction: every extent is at least 1 and the
//! flat buffer length equals the product of extents.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    /// Builds a tensor from a shape and a flat row-major buffer.
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.is_empty() {
            return Err(Error::shape("tensor", "shape must have at least one axis"));
        }
        if let Some(axis) = shape.iter().position(|&e| e == 0) {
            return Err(Error::shape("tensor", format!("axis {axis} has extent 0")));
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} implies {expect} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        debug_assert!(!shape.is_empty() && shape.iter().all(|&e| e > 0));
        let n = shape.iter().product();
        Tensor { shape, data: vec![T::zero(); n] }
    }

    pub fn filled(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    /// Builds a tensor by evaluating `f` at every multi-index, row-major order.
    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(&[usize]) -> T) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        let mut idx = vec![0usize; shape.len()];
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f(&idx));
            for axis in (0..shape.len()).rev() {
                idx[axis] += 1;
                if idx[axis] < shape[axis] {
                    break;
                }
                idx[axis] = 0;
            }
        }
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// Flat offset of a multi-index (debug-checked against the shape).
    #[inline]
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut flat = 0;
        for (axis, (&i, &extent)) in index.iter().zip(&self.shape).enumerate() {
            debug_assert!(i < extent, "index {i} out of bounds on axis {axis}");
            let _ = axis;
            flat = flat * extent + i;
        }
        flat
    }

    #[inline]
    pub fn at(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    #[inline]
    pub fn at_mut(&mut self, index: &[usize]) -> &mut T {
        let off = self.offset(index);
        &mut self.data[off]
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        let expect: usize = shape.iter().product();
        if expect != self.data.len() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&self, factor: T) -> Self {
        self.map(|v| v * factor)
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add",
                format!("left {:?} vs right {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    /// Copy with the given positions removed along one axis, preserving the
    /// order of the survivors. The backbone of filter surgery.
    pub fn remove_indices(&self, axis: usize, drop: &[usize]) -> Result<Self> {
        if axis >= self.shape.len() {
            return Err(Error::shape(
                "remove_indices",
                format!("axis {axis} out of range for shape {:?}", self.shape),
            ));
        }
        let extent = self.shape[axis];
        let dropset: std::collections::BTreeSet<usize> = drop.iter().copied().collect();
        if let Some(&bad) = dropset.iter().find(|&&i| i >= extent) {
            return Err(Error::shape(
                "remove_indices",
                format!("index {bad} out of range on axis {axis} (extent {extent})"),
            ));
        }
        if dropset.len() >= extent {
            return Err(Error::shape(
                "remove_indices",
                format!("would remove all {extent} slices on axis {axis}"),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let kept: Vec<usize> = (0..extent).filter(|i| !dropset.contains(i)).collect();
        let mut data = Vec::with_capacity(outer * kept.len() * inner);
        for o in 0..outer {
            for &i in &kept {
                let start = (o * extent + i) * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = kept.len();
        Ok(Tensor { shape, data })
    }

    /// Largest absolute difference to another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "max_abs_diff",
                format!("left {:?} vs right {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a.to_acc() - b.to_acc()).abs())
            .fold(0.0, f64::max))
    }
}
