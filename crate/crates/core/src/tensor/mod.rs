//! Dense tensors and reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a row-major `Vec<f64>` plus a shape. All differentiable
//! computation is expressed against a [`Tape`](tape::Tape): each primitive
//! records a node, `backward` replays the tape in reverse and accumulates
//! vector-Jacobian products. The primitive set is deliberately closed — the
//! denoiser, the text encoder and the guidance energies are all built from
//! the operations in [`tape`], which keeps the gradient surface small enough
//! to verify exhaustively against finite differences (see [`check`]).
//!
//! Broadcasting is not supported beyond scalar-tensor ops; shape mismatches
//! are rejected with the offending shapes named. Every primitive scans its
//! output and fails fast on NaN/Inf.

pub mod check;
pub mod kernels;
pub mod tape;

pub use check::finite_difference_check;
pub use tape::{Gradients, NodeId, Tape};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dense row-major tensor of `f64` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching flat data.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::new",
                shape,
                msg: format!("shape wants {} elements, data has {}", numel, data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn ones(shape: Vec<usize>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Standard-normal tensor drawn from `rng`, element order = row-major.
    pub fn randn<R: Rng>(shape: Vec<usize>, rng: &mut R) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel)
            .map(|_| StandardNormal.sample(rng))
            .collect::<Vec<f64>>();
        Tensor { shape, data }
    }

    /// Normal tensor with the given standard deviation.
    pub fn randn_scaled<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let mut t = Self::randn(shape, rng);
        for v in &mut t.data {
            *v *= std;
        }
        t
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

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a scalar (rank-0 or one-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::InvalidShape {
                op: "Tensor::item",
                shape: self.shape.clone(),
                msg: "expected exactly one element".into(),
            });
        }
        Ok(self.data[0])
    }

    /// True when every element is finite. Branchless: multiplying by zero
    /// maps finite values to +0 and NaN/Inf to NaN, so the accumulated sum
    /// is zero exactly when the tensor is clean. This keeps the per-op
    /// guard scan vectorizable.
    pub fn all_finite(&self) -> bool {
        let acc: f64 = self.data.iter().map(|v| v * 0.0).sum();
        acc == 0.0
    }

    /// Row-major offset of a 2-D index.
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 2);
        self.data[i * self.shape[1] + j]
    }

    /// Row-major offset of a 3-D index.
    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        debug_assert_eq!(self.shape.len(), 3);
        let (h, w) = (self.shape[1], self.shape[2]);
        self.data[(c * h + y) * w + x]
    }

    /// Reinterprets the data under a new shape with the same element count.
    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::InvalidShape {
                op: "Tensor::reshaped",
                shape,
                msg: format!("cannot hold {} elements", self.data.len()),
            });
        }
        self.shape = shape;
        Ok(self)
    }

    /// Elementwise maximum of |x| over the tensor; 0 for empty tensors.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Squared L2 norm.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn new_rejects_wrong_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "message should name the shape: {msg}");
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at2(0, 0), 0.0);
        assert_eq!(t.at2(0, 2), 2.0);
        assert_eq!(t.at2(1, 0), 3.0);
        let u = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f64).collect()).unwrap();
        assert_eq!(u.at3(1, 0, 1), 5.0);
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut a = ChaCha8Rng::seed_from_u64(7);
        let mut b = ChaCha8Rng::seed_from_u64(7);
        let ta = Tensor::randn(vec![4, 5], &mut a);
        let tb = Tensor::randn(vec![4, 5], &mut b);
        assert_eq!(ta.data(), tb.data());
    }

    #[test]
    fn scalar_item() {
        assert_eq!(Tensor::scalar(2.5).item().unwrap(), 2.5);
        assert!(Tensor::zeros(vec![2]).item().is_err());
    }
}
