//! Dense row-major tensors and the gradient tape that differentiates them.

pub mod gradcheck;
pub mod io;
pub mod ops;
pub mod rng;
pub mod tape;

pub use rng::SeedRng;
pub use tape::{Gradients, Tape, Var};

use crate::error::{shape_err, Result};

/// Rank-N array of `f32` values in row-major order.
///
/// `dims` is never empty and every extent is at least one; a scalar is `[1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NdTensor {
    dims: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
}

impl NdTensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if dims.is_empty() {
            return shape_err("tensor dims must be non-empty");
        }
        if dims.contains(&0) {
            return shape_err(format!("tensor dims must be positive, got {dims:?}"));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return shape_err(format!("dims {dims:?} hold {n} elements but buffer has {}", data.len()));
        }
        Ok(Self { dims, data, requires_grad: false })
    }

    pub fn full(dims: &[usize], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), vec![value; n])
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 0.0)
    }

    pub fn ones(dims: &[usize]) -> Result<Self> {
        Self::full(dims, 1.0)
    }

    pub fn scalar(value: f32) -> Self {
        Self { dims: vec![1], data: vec![value], requires_grad: false }
    }

    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a matrix from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return shape_err("ragged rows");
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut t = Self::zeros(&[n, n])?;
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        Ok(t)
    }

    pub fn randn(dims: &[usize], rng: &mut SeedRng) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), (0..n).map(|_| rng.normal()).collect())
    }

    pub fn uniform(dims: &[usize], lo: f32, hi: f32, rng: &mut SeedRng) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims.to_vec(), (0..n).map(|_| rng.uniform_range(lo, hi)).collect())
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Last extent.
    pub fn cols(&self) -> usize {
        *self.dims.last().expect("non-empty dims")
    }

    /// Product of all but the last extent.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f32 {
        self.data[0]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Same buffer, new dims with equal element count.
    pub fn reshape(&self, dims: &[usize]) -> Result<Self> {
        Self::new(dims.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self { dims: self.dims.clone(), data: self.data.iter().map(|&x| f(x)).collect(), requires_grad: false }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f32, f32) -> f32) -> Result<Self> {
        if self.dims != other.dims {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(Self {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            requires_grad: false,
        })
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f32> {
        if self.dims != other.dims {
            return shape_err(format!("shape mismatch {:?} vs {:?}", self.dims, other.dims));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f32::max))
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().map(|&x| x as f64).sum()
    }

    pub fn abs_sum(&self) -> f64 {
        self.data.iter().map(|&x| (x as f64).abs()).sum()
    }
}
