//! Dense row-major f64 tensors, the value currency of the whole pipeline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::SubstrateError;

/// Dense N-dimensional array of 64-bit floats in row-major order.
///
/// Tensors are immutable values once built; every operation returns a new
/// tensor. NaN/Inf never propagate silently: constructors accept any data,
/// but [`Tensor::check_finite`] is the explicit error surface callers use
/// at trust boundaries (loss values, loaded checkpoints, user images).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self, SubstrateError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(SubstrateError::DataLength {
                expected,
                got: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|i| f(i)).collect(),
        }
    }

    /// i.i.d. uniform samples in `[lo, hi)`.
    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(lo..hi)).collect(),
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Scalar tensors (rank 0 or a single element) unwrap to their value.
    pub fn as_scalar(&self) -> Result<f64, SubstrateError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(SubstrateError::NotScalar {
                shape: self.shape.clone(),
            })
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, SubstrateError> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(SubstrateError::DataLength {
                expected,
                got: self.data.len(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self, label: &str) -> Result<(), SubstrateError> {
        for &v in &self.data {
            if !v.is_finite() {
                return Err(SubstrateError::NonFinite {
                    label: label.to_string(),
                    value: v,
                });
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two same-shaped tensors.
    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, SubstrateError> {
        if self.shape != other.shape {
            return Err(SubstrateError::ShapeMismatch {
                op: "zip",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// In-place accumulation used by the backward pass.
    pub fn add_assign(&mut self, other: &Self) -> Result<(), SubstrateError> {
        if self.shape != other.shape {
            return Err(SubstrateError::ShapeMismatch {
                op: "add_assign",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.sum() / self.data.len() as f64
        }
    }

    pub fn min(&self) -> f64 {
        self.data.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// A trainable tensor with an accumulated gradient of identical shape.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl Parameter {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: true,
        }
    }

    pub fn frozen(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable: false,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn shape_product_must_match_data() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        let err = Tensor::new(&[2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, SubstrateError::DataLength { expected: 6, got: 5 }));
    }

    #[test]
    fn finite_check_flags_nan_and_inf() {
        let t = Tensor::new(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(t.check_finite("t").is_err());
        let t = Tensor::new(&[2], vec![1.0, f64::INFINITY]).unwrap();
        assert!(t.check_finite("t").is_err());
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        assert!(t.check_finite("t").is_ok());
    }

    #[test]
    fn rand_uniform_respects_bounds_and_seed() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::rand_uniform(&[64], -0.1, 0.1, &mut rng);
        assert!(a.data().iter().all(|&v| (-0.1..0.1).contains(&v)));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Tensor::rand_uniform(&[64], -0.1, 0.1, &mut rng);
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_unwrap() {
        assert_eq!(Tensor::scalar(4.5).as_scalar().unwrap(), 4.5);
        assert!(Tensor::zeros(&[2]).as_scalar().is_err());
    }
}
