//! Dense real-valued fields over 2D pixel or 3D voxel grids.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// A scalar field on a regular grid.
///
/// `shape` lists the extent per axis with the first axis varying fastest in
/// `values` (x-fastest order). Fields of one to three axes are accepted; the
/// microstructure pipeline uses two or three.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Field {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Field {
    pub fn new(shape: &[usize], values: Vec<f64>) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        if values.len() != n {
            return invalid!(
                "field of shape {shape:?} needs {n} values, got {}",
                values.len()
            );
        }
        Ok(Self {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Result<Self> {
        validate_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            values: vec![v; shape.iter().product()],
        })
    }

    /// Independent standard-normal draws per cell.
    pub fn standard_normal<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Self> {
        validate_shape(shape)?;
        let n = shape.iter().product();
        let values = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        Ok(Self {
            shape: shape.to_vec(),
            values,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn ensure_same_shape(&self, other: &Field) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                expected: self.shape.clone(),
                actual: other.shape.clone(),
            });
        }
        Ok(())
    }

    /// Elementwise `a * self + b * other`.
    pub fn axpby(&self, a: f64, other: &Field, b: f64) -> Result<Field> {
        self.ensure_same_shape(other)?;
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Ok(Field {
            shape: self.shape.clone(),
            values,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Field {
        Field {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn dot(&self, other: &Field) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Field {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub(crate) fn validate_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return invalid!("expected 1 to 3 axes, got {}", shape.len());
    }
    if shape.contains(&0) {
        return invalid!("grid extents must be >= 1, got {shape:?}");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Field::zeros(&[]).is_err());
        assert!(Field::zeros(&[4, 0]).is_err());
        assert!(Field::zeros(&[2, 2, 2, 2]).is_err());
        assert!(Field::new(&[2, 2], vec![0.0; 3]).is_err());
    }

    #[test]
    fn axpby_checks_shape() {
        let a = Field::filled(&[2, 2], 1.0).unwrap();
        let b = Field::filled(&[4], 1.0).unwrap();
        assert!(matches!(a.axpby(1.0, &b, 1.0), Err(Error::ShapeMismatch { .. })));
        let c = a.axpby(2.0, &a, -0.5).unwrap();
        assert!(c.values().iter().all(|&v| v == 1.5));
    }
}
