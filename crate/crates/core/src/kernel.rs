//! ARD squared-exponential kernel and the spatial derivatives used by the
//! derivative GP.
//!
//! All points live in the unit cube. With `s` the outputscale and `ℓ` the
//! per-dimension lengthscales,
//!
//! ```text
//! k(x, z)            = s · exp(-½ Σᵢ (xᵢ - zᵢ)² / ℓᵢ²)
//! ∂k/∂xᵢ             = -(xᵢ - zᵢ)/ℓᵢ² · k(x, z)
//! ∂k/∂zᵢ             = +(xᵢ - zᵢ)/ℓᵢ² · k(x, z)
//! ∂²k/∂xᵢ∂zᵢ |x=z    = s / ℓᵢ²
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Kernel and mean hyperparameters on the raw output scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub lengthscales: Vec<f64>,
    pub outputscale: f64,
    pub noise_var: f64,
    pub mean_const: f64,
}

impl Hyperparams {
    pub fn new(
        lengthscales: Vec<f64>,
        outputscale: f64,
        noise_var: f64,
        mean_const: f64,
    ) -> Result<Self> {
        let hp = Hyperparams {
            lengthscales,
            outputscale,
            noise_var,
            mean_const,
        };
        hp.validate()?;
        Ok(hp)
    }

    /// Unit lengthscales and outputscale, zero noise and mean.
    pub fn isotropic(dim: usize, lengthscale: f64, outputscale: f64) -> Self {
        Hyperparams {
            lengthscales: vec![lengthscale; dim],
            outputscale,
            noise_var: 0.0,
            mean_const: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.lengthscales.is_empty() {
            return Err(Error::invalid("at least one lengthscale is required"));
        }
        if let Some(l) = self
            .lengthscales
            .iter()
            .find(|l| !(l.is_finite() && **l > 0.0))
        {
            return Err(Error::invalid(format!("lengthscale must be > 0, got {l}")));
        }
        if !(self.outputscale.is_finite() && self.outputscale > 0.0) {
            return Err(Error::invalid(format!(
                "outputscale must be > 0, got {}",
                self.outputscale
            )));
        }
        if !(self.noise_var.is_finite() && self.noise_var >= 0.0) {
            return Err(Error::invalid(format!(
                "noise variance must be >= 0, got {}",
                self.noise_var
            )));
        }
        if !self.mean_const.is_finite() {
            return Err(Error::invalid("mean constant must be finite"));
        }
        Ok(())
    }

    fn check_point(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::invalid(format!(
                "point has dimension {}, kernel expects {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }
}

/// Scaled squared distance `Σᵢ (xᵢ - zᵢ)²/ℓᵢ²` without dimension checks.
#[inline]
pub(crate) fn scaled_sqdist(x: &[f64], z: &[f64], lengthscales: &[f64]) -> f64 {
    x.iter()
        .zip(z)
        .zip(lengthscales)
        .map(|((a, b), l)| {
            let u = (a - b) / l;
            u * u
        })
        .sum()
}

#[inline]
pub(crate) fn kernel_unchecked(x: &[f64], z: &[f64], hp: &Hyperparams) -> f64 {
    hp.outputscale * (-0.5 * scaled_sqdist(x, z, &hp.lengthscales)).exp()
}

pub fn kernel(x: &[f64], z: &[f64], hp: &Hyperparams) -> Result<f64> {
    hp.check_point(x)?;
    hp.check_point(z)?;
    Ok(kernel_unchecked(x, z, hp))
}

/// Gradient of `k(x, z)` with respect to its first argument.
pub fn kernel_grad_x(x: &[f64], z: &[f64], hp: &Hyperparams) -> Result<Vec<f64>> {
    hp.check_point(x)?;
    hp.check_point(z)?;
    let k = kernel_unchecked(x, z, hp);
    Ok(x.iter()
        .zip(z)
        .zip(&hp.lengthscales)
        .map(|((a, b), l)| -(a - b) / (l * l) * k)
        .collect())
}

/// Prior variance of each partial derivative, `s/ℓᵢ²`. Constant in `x` for a
/// stationary kernel.
pub fn kernel_hess_diag(x: &[f64], hp: &Hyperparams) -> Result<Vec<f64>> {
    hp.check_point(x)?;
    Ok(hp
        .lengthscales
        .iter()
        .map(|l| hp.outputscale / (l * l))
        .collect())
}

/// Prior covariance between `f(x)` and `∂f(z)/∂zᵢ`, i.e. `∂k(x, z)/∂zᵢ`.
pub fn kernel_cross_f_deriv(x: &[f64], z: &[f64], hp: &Hyperparams) -> Result<Vec<f64>> {
    hp.check_point(x)?;
    hp.check_point(z)?;
    let k = kernel_unchecked(x, z, hp);
    Ok(x.iter()
        .zip(z)
        .zip(&hp.lengthscales)
        .map(|((a, b), l)| (a - b) / (l * l) * k)
        .collect())
}
