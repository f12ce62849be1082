//! Dense row-major f64 tensors of up to four dimensions.
//!
//! Network activations follow the (batch, channel, height, width) layout;
//! two-dimensional tensors are (batch, features); scalars have an empty
//! shape. Checkpoints quantize to f32 at the file boundary, computation
//! stays in f64.

use crate::error::{NnError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(NnError::Shape(format!(
                "buffer holds {} values, shape {:?} needs {}",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
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

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(NnError::Shape(format!(
                "item() on tensor of {} elements",
                self.data.len()
            )));
        }
        Ok(self.data[0])
    }

    /// Interpret as (batch, channel, height, width).
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(NnError::Shape(format!(
                "expected 4-d tensor, got {:?}",
                self.shape
            ))),
        }
    }

    /// Interpret as (batch, features).
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [b, f] => Ok((b, f)),
            _ => Err(NnError::Shape(format!(
                "expected 2-d tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn assert_finite(&self, label: &str) -> Result<()> {
        if let Some(idx) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(NnError::NonFinite(format!(
                "{label}: entry {idx} = {}",
                self.data[idx]
            )));
        }
        Ok(())
    }

    /// Reinterpret with a new shape of identical element count.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::from_vec(shape, self.data.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_checks() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::zeros(&[2, 1, 4, 4]);
        assert_eq!(t.dims4().unwrap(), (2, 1, 4, 4));
        assert!(t.dims2().is_err());
    }

    #[test]
    fn finite_detection() {
        let mut t = Tensor::zeros(&[4]);
        assert!(t.assert_finite("x").is_ok());
        t.data_mut()[2] = f64::NAN;
        assert!(t.assert_finite("x").is_err());
    }
}
