//! Dense row-major f64 tensor.
//!
//! All training and testing runs in 64-bit precision so the finite-difference
//! gradient oracle stays reliable. Data buffers are shared behind `Arc`, so
//! cloning a tensor is cheap and parameter tensors can be used from several
//! worker threads at once.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

static NEXT_TENSOR_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_TENSOR_ID.fetch_add(1, Ordering::Relaxed)
}

/// Dense row-major tensor of f64 values.
///
/// Every tensor has a process-unique `id`; gradient maps returned by
/// [`crate::graph::Graph::backward`] are keyed by it.
#[derive(Clone, Debug)]
pub struct Tensor {
    id: u64,
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid_shape(
                "Tensor::new",
                &shape,
                format!("shape product {} != data length {}", numel(&shape), data.len()),
            ));
        }
        Ok(Tensor {
            id: fresh_id(),
            shape,
            data: Arc::new(data),
            requires_grad: false,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::new(vec![], vec![v]).expect("scalar shape is always valid")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::new(shape.to_vec(), vec![0.0; numel(shape)]).expect("zeros shape/data agree")
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor::new(shape.to_vec(), vec![v; numel(shape)]).expect("full shape/data agree")
    }

    /// Standard-normal samples, optionally scaled.
    pub fn randn(shape: &[usize], std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor::new(shape.to_vec(), data).expect("randn shape/data agree")
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_arc(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    pub(crate) fn from_arc(shape: Vec<usize>, data: Arc<Vec<f64>>) -> Self {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor {
            id: fresh_id(),
            shape,
            data,
            requires_grad: false,
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
    }

    /// Same data viewed under a new shape with identical element count.
    /// Keeps the tensor identity (id) since no values change.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        if numel(&shape) != self.len() {
            return Err(Error::invalid_shape(
                "reshape",
                &shape,
                format!("cannot view {} elements as {:?}", self.len(), shape),
            ));
        }
        Ok(Tensor {
            id: self.id,
            shape,
            data: Arc::clone(&self.data),
            requires_grad: self.requires_grad,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let data = self.data.iter().map(|&v| f(v)).collect();
        Tensor::new(self.shape.clone(), data).expect("map keeps shape")
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    fn zip(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape_mismatch(op, &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| f(a, b))
            .collect();
        Tensor::new(self.shape.clone(), data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self> {
        self.zip(other, "mul", |a, b| a * b)
    }

    /// a + c*b, the sampler/optimizer update primitive.
    pub fn axpy(&self, c: f64, other: &Tensor) -> Result<Self> {
        self.zip(other, "axpy", |a, b| a + c * b)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Bitwise equality of shape and payload.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(other.data.iter())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn scalar_has_unit_length() {
        let s = Tensor::scalar(4.0);
        assert_eq!(s.len(), 1);
        assert!(s.shape().is_empty());
    }

    #[test]
    fn randn_is_seed_deterministic() {
        let mut r1 = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[4, 4], 1.0, &mut r1);
        let b = Tensor::randn(&[4, 4], 1.0, &mut r2);
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn reshape_preserves_identity_and_rejects_bad_size() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        let r = t.reshaped(vec![3, 2]).unwrap();
        assert_eq!(r.id(), t.id());
        assert!(t.reshaped(vec![4, 2]).is_err());
    }
}
