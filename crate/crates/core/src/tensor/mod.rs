//! Dense f32 tensors, a reverse-mode tape, parameter storage and optimizers.

mod gemm;
pub mod optim;
pub mod params;
mod tape;

pub use optim::{AdaGrad, AdamW, AdamWConfig, LrSchedule, Optimizer};
pub use params::{ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};

pub(crate) use gemm::{gemm, View};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape { op: "tensor", left: shape, right: vec![data.len()] });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::Shape { op: "from_rows", left: vec![cols], right: vec![r.len()] });
            }
            data.extend_from_slice(r);
        }
        Tensor::new(vec![rows.len(), cols], data)
    }

    /// Uniform in `(-bound, bound)`.
    pub fn uniform(shape: &[usize], bound: f32, rng: &mut RngStream) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| (rng.uniform_f32() * 2.0 - 1.0) * bound).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn normal(shape: &[usize], std: f32, rng: &mut RngStream) -> Self {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() as f32 * std).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    /// Glorot-uniform initialisation for a `[fan_in, fan_out]` weight.
    pub fn xavier(fan_in: usize, fan_out: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f32).sqrt();
        Tensor::uniform(&[fan_in, fan_out], bound, rng)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    /// Product of all axes but the last.
    pub fn rows(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.numel() / self.cols().max(1)
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape { op: "reshape", left: self.shape, right: shape.to_vec() });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Pairwise (cascade) summation: error grows with log n rather than n.
pub fn pairwise_sum(xs: &[f32]) -> f32 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        let mut s = 0.0f32;
        for &x in xs {
            s += x;
        }
        return s;
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut s = pairwise_sum(&acc);
    for i in chunks * 8..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm(a: &[f32]) -> f32 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_f64() {
        let xs: Vec<f32> = (0..10_000).map(|i| ((i * 37) % 101) as f32 * 0.01).collect();
        let exact: f64 = xs.iter().map(|&x| x as f64).sum();
        assert!((pairwise_sum(&xs) as f64 - exact).abs() < 1e-3);
    }

    #[test]
    fn shape_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::zeros(&[2, 3]);
        assert_eq!((t.rows(), t.cols()), (2, 3));
        assert!(t.reshape(&[4]).is_err());
    }
}
