//! Stationary one-dimensional covariance kernels and their half-line transforms.

use std::f64::consts::{PI, SQRT_2};

use errorfunctions::ComplexErrorFunctions;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::quadrature::{adaptive_estimate, AdaptiveOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    /// `R(z) = variance * exp(-z^2 / (2 l^2))`
    Gaussian,
    /// `R(z) = variance * exp(-|z| / l)`
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CovarianceKernel1D {
    pub family: KernelFamily,
    pub variance: f64,
    pub corr_length: f64,
}

impl CovarianceKernel1D {
    pub fn new(family: KernelFamily, variance: f64, corr_length: f64) -> Result<Self> {
        let kernel = Self {
            family,
            variance,
            corr_length,
        };
        kernel.validate("kernel")?;
        Ok(kernel)
    }

    pub fn gaussian(variance: f64, corr_length: f64) -> Result<Self> {
        Self::new(KernelFamily::Gaussian, variance, corr_length)
    }

    pub fn exponential(variance: f64, corr_length: f64) -> Result<Self> {
        Self::new(KernelFamily::Exponential, variance, corr_length)
    }

    /// Checks parameter ranges; `prefix` names the config section in errors.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        if !(self.variance.is_finite() && self.variance >= 0.0) {
            return Err(invalid(
                &format!("{prefix}.variance"),
                format!("must be >= 0, got {}", self.variance),
            ));
        }
        if !(self.corr_length.is_finite() && self.corr_length > 0.0) {
            return Err(invalid(
                &format!("{prefix}.corr_length"),
                format!("must be > 0, got {}", self.corr_length),
            ));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            variance: self.variance * factor,
            ..*self
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        let l = self.corr_length;
        match self.family {
            KernelFamily::Gaussian => self.variance * (-(z * z) / (2.0 * l * l)).exp(),
            KernelFamily::Exponential => self.variance * (-z.abs() / l).exp(),
        }
    }

    /// `int_0^inf R(z) cos(beta z) dz`
    pub fn c_cos(&self, beta: f64) -> f64 {
        let (v, l) = (self.variance, self.corr_length);
        match self.family {
            KernelFamily::Gaussian => v * l * (PI / 2.0).sqrt() * (-0.5 * (beta * l).powi(2)).exp(),
            KernelFamily::Exponential => v * l / (1.0 + (beta * l).powi(2)),
        }
    }

    /// `int_0^inf R(z) sin(beta z) dz`
    pub fn c_sin(&self, beta: f64) -> f64 {
        let (v, l) = (self.variance, self.corr_length);
        match self.family {
            KernelFamily::Gaussian => {
                // sqrt(2) l times Dawson's integral at beta l / sqrt(2)
                let x = beta * l / SQRT_2;
                let dawson = 0.5 * PI.sqrt() * Complex64::new(x, 0.0).w().im;
                v * SQRT_2 * l * dawson
            }
            KernelFamily::Exponential => v * l * l * beta / (1.0 + (beta * l).powi(2)),
        }
    }

    /// `int_0^inf R(z) cos(beta z) exp(-s z) dz` for `s >= 0`.
    pub fn c_lap(&self, beta: f64, s: f64) -> f64 {
        let (v, l) = (self.variance, self.corr_length);
        match self.family {
            KernelFamily::Gaussian => {
                let arg = Complex64::new(s, -beta) * (l / SQRT_2);
                v * l * (PI / 2.0).sqrt() * arg.erfcx().re
            }
            KernelFamily::Exponential => {
                let a = 1.0 + s * l;
                v * l * a / (a * a + (beta * l).powi(2))
            }
        }
    }

    /// Full-line Fourier transform `int R(z) exp(i beta z) dz = 2 c_cos(beta)`.
    pub fn fourier(&self, beta: f64) -> f64 {
        2.0 * self.c_cos(beta)
    }

    /// Range beyond which `R(z) / R(0)` is below `1e-18`.
    fn numeric_cutoff(&self) -> f64 {
        let l = self.corr_length;
        match self.family {
            KernelFamily::Gaussian => l * (2.0 * 18.0 * 10f64.ln()).sqrt(),
            KernelFamily::Exponential => l * 18.0 * 10f64.ln(),
        }
    }

    /// Reference quadrature of the damped cosine transform, for validation.
    pub fn c_lap_numeric(&self, beta: f64, s: f64) -> f64 {
        numeric_transform(
            |z| self.eval(z) * (-s * z).exp(),
            beta,
            self.numeric_cutoff(),
            false,
        )
    }

    /// Reference quadrature of the sine transform, for validation.
    pub fn c_sin_numeric(&self, beta: f64) -> f64 {
        numeric_transform(|z| self.eval(z), beta, self.numeric_cutoff(), true)
    }

    /// Reference quadrature of the cosine transform, for validation.
    pub fn c_cos_numeric(&self, beta: f64) -> f64 {
        self.c_lap_numeric(beta, 0.0)
    }
}

/// `int_0^zmax r(z) cos(beta z) dz` (or `sin`) by panelled adaptive quadrature.
pub fn numeric_transform<F: Fn(f64) -> f64>(r: F, beta: f64, zmax: f64, sine: bool) -> f64 {
    let panels = 16 + (beta.abs() * zmax / PI) as usize;
    let opts = AdaptiveOptions {
        abs_tol: 1e-16,
        rel_tol: 1e-13,
        max_intervals: 200_000,
        initial_panels: panels,
    };
    if sine {
        adaptive_estimate(|z| r(z) * (beta * z).sin(), 0.0, zmax, opts)
    } else {
        adaptive_estimate(|z| r(z) * (beta * z).cos(), 0.0, zmax, opts)
    }
}
