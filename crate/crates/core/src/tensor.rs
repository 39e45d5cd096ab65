//! Dense row-major tensors used for parameters, buffers and data batches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

/// A dense tensor in row-major order. Images use NCHW.
///
/// `grad` is only ever populated when `requires_grad` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() {
        return Err(shape_err!("empty shape"));
    }
    if let Some(pos) = shape.iter().position(|&e| e == 0) {
        return Err(shape_err!("extent {pos} of {shape:?} is zero"));
    }
    Ok(shape.iter().product())
}

impl<S: Scalar> Tensor<S> {
    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        let numel = check_shape(shape)?;
        if numel != data.len() {
            return Err(shape_err!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        let numel = check_shape(shape)?;
        Self::from_vec(shape, vec![S::zero(); numel])
    }

    pub fn full(shape: &[usize], value: S) -> Result<Self> {
        let numel = check_shape(shape)?;
        Self::from_vec(shape, vec![value; numel])
    }

    /// Normal samples with mean 0 and the given standard deviation,
    /// reproducible for a fixed seed.
    pub fn randn(shape: &[usize], seed: u64, stddev: f64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::randn_with(shape, &mut rng, stddev)
    }

    pub fn randn_with<R: rand::Rng>(shape: &[usize], rng: &mut R, stddev: f64) -> Result<Self> {
        let numel = check_shape(shape)?;
        let data = (0..numel)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                S::lit(z * stddev)
            })
            .collect();
        Self::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients off also drops any accumulated gradient.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn with_requires_grad(mut self, on: bool) -> Self {
        self.set_requires_grad(on);
        self
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient buffer. Ignored unless `requires_grad`.
    pub fn accumulate_grad(&mut self, g: &[S]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.data.len() {
            return Err(shape_err!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            ));
        }
        match &mut self.grad {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(b, &v)| *b += v),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data.clone())
    }

    pub fn mean(&self) -> S {
        self.data.iter().copied().sum::<S>() / S::from_usize_lossy(self.data.len())
    }

    /// Converts element type, dropping gradient state.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Bitwise equality of shape and values (distinguishes -0.0 and NaN payloads).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_are_zero() {
        let t = Tensor::<f32>::zeros(&[2, 2]).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
    }

    #[test]
    fn zero_extent_is_rejected() {
        assert!(matches!(
            Tensor::<f32>::zeros(&[2, 0]),
            Err(crate::Error::Shape(_))
        ));
        assert!(Tensor::<f32>::randn(&[0], 1, 1.0).is_err());
    }

    #[test]
    fn randn_is_deterministic() {
        let a = Tensor::<f32>::randn(&[4], 7, 1.0).unwrap();
        let b = Tensor::<f32>::randn(&[4], 7, 1.0).unwrap();
        let bytes = |t: &Tensor<f32>| t.data().iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>();
        assert_eq!(bytes(&a), bytes(&b));
    }

    #[test]
    fn randn_mean_is_near_zero() {
        let t = Tensor::<f32>::randn(&[10000], 1, 1.0).unwrap();
        // direct recomputation in f64
        let m = t.data().iter().map(|&v| v as f64).sum::<f64>() / 10000.0;
        assert!(m.abs() < 0.05, "mean {m}");
    }

    #[test]
    fn frozen_tensor_never_accumulates() {
        let mut t = Tensor::<f32>::zeros(&[3]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert!(t.grad().is_none());
        t.set_requires_grad(true);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 4.0, 6.0]);
        assert!(t.accumulate_grad(&[1.0]).is_err());
    }
}
