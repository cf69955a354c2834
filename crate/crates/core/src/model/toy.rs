use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::model::LossModel;

/// Scalar model `ℓ(w, z) = z·w²` with two equally likely positive `z` values.
///
/// Every certificate quantity is constant in `w ≠ 0`:
/// `a = 4z̄`, `b = Var(z)/z̄`, `g = 4Var(z)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarToyModel {
    z: [f64; 2],
}

impl ScalarToyModel {
    pub fn new(z1: f64, z2: f64) -> Result<Self> {
        if !(z1.is_finite() && z2.is_finite() && z1 > 0.0 && z2 > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "toy model needs two positive z values, got {z1}, {z2}"
            )));
        }
        Ok(Self { z: [z1, z2] })
    }

    pub fn z_mean(&self) -> f64 {
        0.5 * (self.z[0] + self.z[1])
    }

    /// Population variance over the two equally weighted values.
    pub fn z_var(&self) -> f64 {
        let h = 0.5 * (self.z[0] - self.z[1]);
        h * h
    }
}

impl LossModel for ScalarToyModel {
    fn dim(&self) -> usize {
        1
    }

    fn n_samples(&self) -> usize {
        2
    }

    fn sample_loss(&self, w: &DVector<f64>, i: usize) -> Result<f64> {
        let z = self
            .z
            .get(i)
            .ok_or(Error::IndexOutOfRange { index: i, n: 2 })?;
        Ok(z * w[0] * w[0])
    }

    fn per_sample_grad(&self, w: &DVector<f64>, i: usize) -> Result<DVector<f64>> {
        let z = self
            .z
            .get(i)
            .ok_or(Error::IndexOutOfRange { index: i, n: 2 })?;
        Ok(DVector::from_element(1, 2.0 * z * w[0]))
    }

    fn hessian(&self, _w: &DVector<f64>) -> SymMatrix {
        SymMatrix::from_diagonal(&[2.0 * self.z_mean()]).expect("finite")
    }
}
