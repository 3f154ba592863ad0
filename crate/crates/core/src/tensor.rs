use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return shape_err(format!("shape {:?} holds {} values but {} were supplied", shape, numel, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    /// Entries drawn from N(0, std²).
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        Self { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference; `None` on shape mismatch.
    pub fn max_abs_diff(&self, other: &Tensor) -> Option<f64> {
        if self.shape != other.shape {
            return None;
        }
        Some(self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    /// Copies the given indices of axis 0 into a new tensor.
    pub fn select_outer(&self, indices: &[usize]) -> Result<Self> {
        self.select_axis(0, indices)
    }

    /// Copies the given indices along `axis` into a new tensor, preserving order.
    pub fn select_axis(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.shape.len() {
            return shape_err(format!("axis {axis} out of range for shape {:?}", self.shape));
        }
        let extent = self.shape[axis];
        if let Some(&bad) = indices.iter().find(|&&i| i >= extent) {
            return shape_err(format!("index {bad} out of range for axis {axis} of extent {extent}"));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for &i in indices {
                let start = base + i * inner;
                data.extend_from_slice(&self.data[start..start + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Self { shape, data })
    }

    /// Builds a tensor whose slice `j` along `axis` is slice `map[j]` of
    /// `self`, or zeros for `None`.
    pub fn gather_axis(&self, axis: usize, map: &[Option<usize>]) -> Result<Self> {
        if axis >= self.shape.len() {
            return shape_err(format!("axis {axis} out of range for shape {:?}", self.shape));
        }
        let extent = self.shape[axis];
        if let Some(bad) = map.iter().flatten().find(|&&i| i >= extent) {
            return shape_err(format!("index {bad} out of range for axis {axis} of extent {extent}"));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * map.len() * inner);
        for o in 0..outer {
            let base = o * extent * inner;
            for src in map {
                match src {
                    Some(i) => {
                        let start = base + i * inner;
                        data.extend_from_slice(&self.data[start..start + inner]);
                    }
                    None => data.extend(std::iter::repeat_n(0.0, inner)),
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = map.len();
        Ok(Self { shape, data })
    }
}
