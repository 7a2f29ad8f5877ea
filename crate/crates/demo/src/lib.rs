//! Browser bindings: mode profiles, intensity moment curves and the continuum
//! eigenfunction. Every export returns a JSON string.
use serde::Serialize;
use wasm_bindgen::prelude::*;

use rwg::continuum::{h1_eigenproblem, GammaInfinity, GammaProfile, Spacing};
use rwg::coupling::{CouplingOptions, CouplingSet, CovarianceModel};
use rwg::kernel::{CovarianceKernel1D, KernelFamily};
use rwg::mode_solver::{ModeBasis, WaveguideSpec};
use rwg::moments::{intensity_from_moments, intensity_weights, moment_trajectory};
use rwg::spectral::growth_rates;

#[derive(Debug, Serialize)]
pub struct ModeProfiles {
    pub v_number: f64,
    pub x: Vec<f64>,
    pub beta: Vec<f64>,
    /// One row per guided mode, sampled at `x`.
    pub profiles: Vec<Vec<f64>>,
}

/// Guided mode shapes on `[-d, d]`, twice the core width.
pub fn mode_profiles(n: f64, d: f64, k: f64, samples: usize) -> rwg::Result<ModeProfiles> {
    let basis = ModeBasis::new(WaveguideSpec::new(n, d, k, 0.0)?)?;
    let samples = samples.max(2);
    let x: Vec<f64> = (0..samples)
        .map(|i| -d + 2.0 * d * i as f64 / (samples - 1) as f64)
        .collect();
    let profiles = (0..basis.len())
        .map(|j| x.iter().map(|&xi| basis.eval(j, xi)).collect())
        .collect();
    Ok(ModeProfiles {
        v_number: basis.spec.v_number(),
        x,
        beta: basis.betas(),
        profiles,
    })
}

#[derive(Debug, Serialize)]
pub struct MomentCurves {
    pub n_modes: usize,
    pub z: Vec<f64>,
    /// `E|p(x)|^2`.
    pub m2: Vec<f64>,
    /// `E|p(x)|^4`.
    pub m4: Vec<f64>,
    pub ratio: Vec<f64>,
    pub lambda: f64,
    pub mu: f64,
    /// `-(mu - 2 lambda)`.
    pub exponent: f64,
}

/// Intensity moments at `x` for boundary roughness with a Gaussian kernel.
#[allow(clippy::too_many_arguments)]
pub fn moment_curves(
    n: f64,
    d: f64,
    k: f64,
    variance: f64,
    corr_length: f64,
    x: f64,
    z_max: f64,
    points: usize,
) -> rwg::Result<MomentCurves> {
    let basis = ModeBasis::new(WaveguideSpec::new(n, d, k, 0.0)?)?;
    let model = CovarianceModel::TypeII {
        kernel: CovarianceKernel1D::new(KernelFamily::Gaussian, variance, corr_length)?,
    };
    let coupling = CouplingSet::compute(&basis, &model, &CouplingOptions::default())?;
    let spectral = growth_rates(&coupling)?;
    let points = points.max(2);
    let z: Vec<f64> = (0..points)
        .map(|i| z_max * i as f64 / (points - 1) as f64)
        .collect();
    let weights = intensity_weights(&basis, x);
    let states = moment_trajectory(&coupling, &basis.source_amplitudes(), &z)?;
    let (m2, m4): (Vec<f64>, Vec<f64>) = states
        .iter()
        .map(|s| intensity_from_moments(&weights, &s.q, &s.s))
        .unzip();
    let ratio = m2.iter().zip(&m4).map(|(a, b)| b / (a * a)).collect();
    Ok(MomentCurves {
        n_modes: basis.len(),
        z,
        m2,
        m4,
        ratio,
        lambda: spectral.lambda,
        mu: spectral.mu,
        exponent: -spectral.gap,
    })
}

#[derive(Debug, Serialize)]
pub struct Eigenfunction {
    pub lambda: f64,
    pub lambda_extrapolated: f64,
    pub u: Vec<f64>,
    pub phi: Vec<f64>,
}

/// Principal eigenfunction of the continuum operator. `kind` is `"constant"`
/// (uses `value`) or `"type2"` (uses the slab and kernel parameters).
pub fn continuum_eigenfunction(
    kind: &str,
    value: f64,
    n: f64,
    d: f64,
    corr_length: f64,
    m: usize,
) -> rwg::Result<Eigenfunction> {
    let profile = match kind {
        "constant" => GammaProfile::Constant { value },
        "type2" => GammaProfile::TypeII {
            n,
            d,
            kernel: CovarianceKernel1D::new(KernelFamily::Gaussian, 1.0, corr_length)?,
            spacing: Spacing::default(),
        },
        other => {
            return Err(rwg::Error::InvalidParameter {
                key: "kind".into(),
                reason: format!("expected constant or type2, got {other}"),
            })
        }
    };
    let s = h1_eigenproblem(&GammaInfinity::new(profile)?, m)?;
    Ok(Eigenfunction {
        lambda: s.lambda,
        lambda_extrapolated: s.lambda_extrapolated,
        u: s.u,
        phi: s.phi,
    })
}

fn to_js<T: Serialize>(r: rwg::Result<T>) -> Result<String, JsError> {
    let value = r.map_err(|e| JsError::new(&e.to_string()))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = modeProfiles)]
pub fn mode_profiles_js(n: f64, d: f64, k: f64, samples: usize) -> Result<String, JsError> {
    to_js(mode_profiles(n, d, k, samples))
}

#[wasm_bindgen(js_name = momentCurves)]
#[allow(clippy::too_many_arguments)]
pub fn moment_curves_js(
    n: f64,
    d: f64,
    k: f64,
    variance: f64,
    corr_length: f64,
    x: f64,
    z_max: f64,
    points: usize,
) -> Result<String, JsError> {
    to_js(moment_curves(
        n,
        d,
        k,
        variance,
        corr_length,
        x,
        z_max,
        points,
    ))
}

#[wasm_bindgen(js_name = continuumEigenfunction)]
pub fn continuum_eigenfunction_js(
    kind: &str,
    value: f64,
    n: f64,
    d: f64,
    corr_length: f64,
    m: usize,
) -> Result<String, JsError> {
    to_js(continuum_eigenfunction(kind, value, n, d, corr_length, m))
}
