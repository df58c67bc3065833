//! Dense row-major f64 tensors.
//!
//! Everything in this crate runs in 64-bit floats: the attack-side Adam
//! update divides by `delta + sqrt(v)` with `delta = 1e-8`, and 32-bit
//! precision would muddy that regime.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::InvalidInput(format!(
                "tensor values length {} does not match shape {:?} (product {})",
                values.len(),
                shape,
                len
            )));
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; len],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading dimension, treated as the batch axis.
    pub fn batch_size(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Element count of one example (everything after the batch axis).
    pub fn example_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn example(&self, b: usize) -> &[f64] {
        let n = self.example_len();
        &self.values[b * n..(b + 1) * n]
    }

    pub fn example_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.example_len();
        &mut self.values[b * n..(b + 1) * n]
    }

    /// Slices one example out as a batch-of-one tensor.
    pub fn slice_example(&self, b: usize) -> Tensor {
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            values: self.example(b).to_vec(),
        }
    }

    /// Stacks batch-of-one tensors back into a batch.
    pub fn stack(examples: &[Tensor]) -> Result<Tensor> {
        let first = examples
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot stack zero tensors".into()))?;
        let mut shape = first.shape.clone();
        shape[0] = examples.len();
        let mut values = Vec::with_capacity(first.len() * examples.len());
        for t in examples {
            if t.shape != first.shape {
                return Err(Error::InvalidInput(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            values.extend_from_slice(&t.values);
        }
        Tensor::new(shape, values)
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.values.len() {
            return Err(Error::InvalidInput(format!(
                "cannot reshape {} values to {:?}",
                self.values.len(),
                shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn l1_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn linf_distance(&self, other: &Tensor) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// sign with sign(0) = 0, so a zero gradient fabricates no perturbation.
pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn example_slicing_is_row_major() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(t.example(0), &[1., 2., 3.]);
        assert_eq!(t.example(1), &[4., 5., 6.]);
        let s = t.slice_example(1);
        assert_eq!(s.shape, vec![1, 3]);
        assert_eq!(s.values, vec![4., 5., 6.]);
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(3.5), 1.0);
        assert_eq!(sign(-0.1), -1.0);
    }
}
