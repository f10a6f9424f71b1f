//! Dense NCHW tensors and a reverse-mode differentiation graph.
//!
//! [`Tensor`] is an immutable value. [`Graph`] records operations on
//! [`Var`] handles; every backward rule is itself expressed with graph
//! operations, so gradients can be differentiated again (R1, path length).

mod graph;
pub(crate) mod kernels;

pub use graph::{Graph, Var};
pub use kernels::Padding;

use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{ensure, Error, Result};

/// Immutable dense array of `f64` in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        ensure!(
            numel(shape) == data.len(),
            "data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor::from_parts(shape.to_vec(), vec![value; numel(shape)])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor::from_parts(vec![], vec![value])
    }

    /// Standard-normal entries drawn in row-major order.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::from_parts(shape.to_vec(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        ensure!(
            numel(shape) == self.numel(),
            "cannot reshape {:?} into {:?}",
            self.shape,
            shape
        );
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor::from_parts(self.shape.clone(), self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn zip_with(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        kernels::broadcast_binary(self, other, f)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip_with(other, |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.numel() as f64
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "max_abs_diff",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        Ok(self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality of shape and every element.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Sum-reduce broadcast dimensions down to `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Result<Self> {
        kernels::sum_to(self, shape)
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        kernels::broadcast_to(self, shape)
    }

    /// Sum over the given axes, keeping them as extent-1 dimensions.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        let target = reduced_shape(&self.shape, axes)?;
        kernels::sum_to(self, &target)
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Self> {
        let target = reduced_shape(&self.shape, axes)?;
        let count = (numel(&self.shape) / numel(&target).max(1)) as f64;
        Ok(kernels::sum_to(self, &target)?.scale(1.0 / count))
    }

    pub fn conv2d(&self, weight: &Tensor, padding: Padding) -> Result<Self> {
        kernels::check_conv(self.shape(), weight.shape())?;
        Ok(kernels::conv2d(self, weight, padding))
    }

    /// Select one example of an NCHW batch, keeping a leading extent of 1.
    pub fn example(&self, n: usize) -> Result<Self> {
        ensure!(self.rank() == 4 && n < self.shape[0], "example {n} of {:?}", self.shape);
        let per = numel(&self.shape[1..]);
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Ok(Tensor::from_parts(
            shape,
            self.data[n * per..(n + 1) * per].to_vec(),
        ))
    }

    /// Concatenate NCHW tensors along the batch axis.
    pub fn cat_batch(parts: &[Tensor]) -> Result<Self> {
        ensure!(!parts.is_empty(), "cat_batch of zero tensors");
        let tail = &parts[0].shape[1..];
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            ensure!(
                p.rank() == parts[0].rank() && &p.shape[1..] == tail,
                "cat_batch shape {:?} vs {:?}",
                p.shape,
                parts[0].shape
            );
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = parts[0].shape.clone();
        shape[0] = n;
        Ok(Tensor::from_parts(shape, data))
    }
}

pub(crate) fn reduced_shape(shape: &[usize], axes: &[usize]) -> Result<Vec<usize>> {
    let mut target = shape.to_vec();
    for &a in axes {
        ensure!(a < shape.len(), "axis {a} out of range for {:?}", shape);
        target[a] = 1;
    }
    Ok(target)
}
