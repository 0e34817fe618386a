//! Binary two-phase grids.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::field::{validate_shape, Field};

/// Binary phase map on a 2D or 3D lattice, x-fastest.
///
/// Phase 0 is the matrix and phase 1 the phase of interest. `periodic`
/// selects wraparound statistics at the domain edges.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Microstructure {
    shape: Vec<usize>,
    phase: Vec<u8>,
    pub periodic: bool,
}

impl Microstructure {
    pub fn new(shape: &[usize], phase: Vec<u8>, periodic: bool) -> Result<Self> {
        validate_shape(shape)?;
        if !(2..=3).contains(&shape.len()) {
            return invalid!("microstructures are 2D or 3D, got {} axes", shape.len());
        }
        let n: usize = shape.iter().product();
        if phase.len() != n {
            return invalid!("expected {n} cells for shape {shape:?}, got {}", phase.len());
        }
        if phase.iter().any(|&p| p > 1) {
            return invalid!("phase values must be 0 or 1");
        }
        Ok(Self {
            shape: shape.to_vec(),
            phase,
            periodic,
        })
    }

    pub fn filled(shape: &[usize], value: u8, periodic: bool) -> Result<Self> {
        let n = shape.iter().product();
        Self::new(shape, vec![value; n], periodic)
    }

    /// Build from a predicate over cell coordinates (x, y[, z]).
    pub fn from_fn(shape: &[usize], periodic: bool, f: impl Fn(&[usize]) -> bool) -> Result<Self> {
        validate_shape(shape)?;
        let n: usize = shape.iter().product();
        let mut coord = vec![0usize; shape.len()];
        let mut phase = Vec::with_capacity(n);
        for idx in 0..n {
            unravel(idx, shape, &mut coord);
            phase.push(u8::from(f(&coord)));
        }
        Self::new(shape, phase, periodic)
    }

    /// Threshold a continuous field at 0: positive cells become phase 1.
    pub fn from_field(field: &Field, periodic: bool) -> Result<Self> {
        let phase = field.values().iter().map(|&v| u8::from(v > 0.0)).collect();
        Self::new(field.shape(), phase, periodic)
    }

    /// Encode phases as -1 (matrix) / +1 (inclusion).
    pub fn to_field(&self) -> Field {
        let values = self
            .phase
            .iter()
            .map(|&p| if p == 1 { 1.0 } else { -1.0 })
            .collect();
        Field::new(&self.shape, values).expect("shape already validated")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn dims(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.phase.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phase.is_empty()
    }

    pub fn phases(&self) -> &[u8] {
        &self.phase
    }

    pub fn get(&self, coord: &[usize]) -> u8 {
        self.phase[ravel(coord, &self.shape)]
    }

    /// Fraction of cells in phase 1.
    pub fn volume_fraction(&self) -> f64 {
        self.phase.iter().map(|&p| p as usize).sum::<usize>() as f64 / self.phase.len() as f64
    }

    /// Swap the two phases.
    pub fn complement(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            phase: self.phase.iter().map(|&p| 1 - p).collect(),
            periodic: self.periodic,
        }
    }

    /// Fraction of cells whose phase differs.
    pub fn hamming_fraction(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return invalid!("shape mismatch {:?} vs {:?}", self.shape, other.shape);
        }
        let diff = self
            .phase
            .iter()
            .zip(&other.phase)
            .filter(|(a, b)| a != b)
            .count();
        Ok(diff as f64 / self.phase.len() as f64)
    }

    pub fn min_extent(&self) -> usize {
        *self.shape.iter().min().unwrap()
    }

    pub(crate) fn stride(&self, axis: usize) -> usize {
        self.shape[..axis].iter().product()
    }
}

pub(crate) fn unravel(mut idx: usize, shape: &[usize], coord: &mut [usize]) {
    for (c, &n) in coord.iter_mut().zip(shape) {
        *c = idx % n;
        idx /= n;
    }
}

pub(crate) fn ravel(coord: &[usize], shape: &[usize]) -> usize {
    let mut idx = 0;
    let mut stride = 1;
    for (&c, &n) in coord.iter().zip(shape) {
        idx += c * stride;
        stride *= n;
    }
    idx
}
