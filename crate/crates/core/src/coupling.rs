//! Perturbation statistics and the effective coupling coefficients of the
//! limiting mode-amplitude diffusion.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::kernel::CovarianceKernel1D;
use crate::mode_solver::{GuidedMode, ModeBasis, Parity, RadiatingMode, WaveguideSpec};
use crate::par::map_indices;
use crate::quadrature::{adaptive, AdaptiveOptions, GaussLegendre};

pub const COUPLING_SCHEMA: &str = "rwg.coupling/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparableProfile {
    Uniform,
    Sine,
    Cosine,
}

/// Transverse shape `R_c(x, x')` of an interior (type I) perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase", deny_unknown_fields)]
pub enum TransverseKernel {
    Gaussian {
        corr_length: f64,
    },
    Exponential {
        corr_length: f64,
    },
    /// `f(x) f(x')` with `f` one of the profiles over the core.
    Separable {
        profile: SeparableProfile,
    },
}

impl TransverseKernel {
    pub fn eval(&self, x: f64, x2: f64, d: f64) -> f64 {
        match *self {
            TransverseKernel::Gaussian { corr_length } => {
                (-(x - x2).powi(2) / (2.0 * corr_length * corr_length)).exp()
            }
            TransverseKernel::Exponential { corr_length } => (-(x - x2).abs() / corr_length).exp(),
            TransverseKernel::Separable { profile } => {
                let f = |y: f64| match profile {
                    SeparableProfile::Uniform => 1.0,
                    SeparableProfile::Sine => (PI * y / d).sin(),
                    SeparableProfile::Cosine => (PI * y / d).cos(),
                };
                f(x) * f(x2)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            TransverseKernel::Gaussian { corr_length }
            | TransverseKernel::Exponential { corr_length }
                if !(corr_length.is_finite() && corr_length > 0.0) =>
            {
                Err(invalid(
                    "perturbation.transverse.corr_length",
                    format!("must be > 0, got {corr_length}"),
                ))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum CovarianceModel {
    /// Interior index fluctuations `R_c(x,x') R_l(z)`.
    #[serde(rename = "type1")]
    TypeI {
        transverse: TransverseKernel,
        longitudinal: CovarianceKernel1D,
    },
    /// Independent, identically distributed boundary displacements.
    #[serde(rename = "type2")]
    TypeII { kernel: CovarianceKernel1D },
}

impl CovarianceModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            CovarianceModel::TypeI {
                transverse,
                longitudinal,
            } => {
                transverse.validate()?;
                longitudinal.validate("perturbation")
            }
            CovarianceModel::TypeII { kernel } => kernel.validate("perturbation"),
        }
    }

    /// Kernel carrying the `z` dependence and the variance.
    pub fn longitudinal(&self) -> &CovarianceKernel1D {
        match self {
            CovarianceModel::TypeI { longitudinal, .. } => longitudinal,
            CovarianceModel::TypeII { kernel } => kernel,
        }
    }

    /// Same model with the variance multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        match *self {
            CovarianceModel::TypeI {
                transverse,
                longitudinal,
            } => CovarianceModel::TypeI {
                transverse,
                longitudinal: longitudinal.scaled(factor),
            },
            CovarianceModel::TypeII { kernel } => CovarianceModel::TypeII {
                kernel: kernel.scaled(factor),
            },
        }
    }
}

/// `z -> E[C_{j,l}(0) C_{j',l'}(z)] = amplitude * kernel(z)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZCovariance {
    pub amplitude: f64,
    pub kernel: CovarianceKernel1D,
}

impl ZCovariance {
    pub fn eval(&self, z: f64) -> f64 {
        self.amplitude * self.kernel.eval(z)
    }
}

/// Type II amplitude from boundary values only: `values_plus[i] = f_i(d/2)`,
/// `values_minus[i] = f_i(-d/2)` for the four fields `j, l, j', l'`.
pub fn type_ii_amplitude(n: f64, d: f64, values_plus: [f64; 4], values_minus: [f64; 4]) -> f64 {
    let contrast = n * n - 1.0;
    let plus: f64 = values_plus.iter().product();
    let minus: f64 = values_minus.iter().product();
    contrast * contrast * d * d * (minus + plus)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CouplingOptions {
    /// Gauss–Legendre order of the tensor rule on the core square.
    pub transverse_order: usize,
    /// Initial panels for the radiating-spectrum integrals.
    pub radiative_panels: usize,
    pub rel_tol: f64,
}

impl Default for CouplingOptions {
    fn default() -> Self {
        Self {
            transverse_order: 64,
            radiative_panels: 16,
            rel_tol: 1e-11,
        }
    }
}

/// A transverse field reduced to what the amplitudes need.
#[derive(Debug, Clone)]
struct FieldSample {
    plus: f64,
    minus: f64,
    /// Values at the transverse quadrature nodes (empty for type II).
    nodes: Vec<f64>,
}

/// Precomputed transverse data shared by every amplitude evaluation.
pub struct CouplingContext<'a> {
    basis: &'a ModeBasis,
    model: CovarianceModel,
    nodes: Vec<f64>,
    weights: Vec<f64>,
    gram: Option<DMatrix<f64>>,
    guided: Vec<FieldSample>,
}

impl<'a> CouplingContext<'a> {
    pub fn new(
        basis: &'a ModeBasis,
        model: &CovarianceModel,
        opts: &CouplingOptions,
    ) -> Result<Self> {
        model.validate()?;
        if opts.transverse_order < 2 {
            return Err(invalid("numerics.transverse_order", "must be >= 2"));
        }
        let d = basis.spec.d;
        let (nodes, weights, gram) = match model {
            CovarianceModel::TypeI { transverse, .. } => {
                let rule = GaussLegendre::new(opts.transverse_order);
                let (nodes, weights): (Vec<f64>, Vec<f64>) = rule.mapped(-0.5 * d, 0.5 * d).unzip();
                let m = nodes.len();
                let gram = DMatrix::from_fn(m, m, |a, b| transverse.eval(nodes[a], nodes[b], d));
                (nodes, weights, Some(gram))
            }
            CovarianceModel::TypeII { .. } => (Vec::new(), Vec::new(), None),
        };
        let mut ctx = Self {
            basis,
            model: *model,
            nodes,
            weights,
            gram,
            guided: Vec::new(),
        };
        ctx.guided = basis
            .modes
            .iter()
            .map(|m| ctx.sample(|x| m.eval(&basis.spec, x)))
            .collect();
        Ok(ctx)
    }

    fn spec(&self) -> &WaveguideSpec {
        &self.basis.spec
    }

    fn sample<F: Fn(f64) -> f64>(&self, f: F) -> FieldSample {
        let h = 0.5 * self.spec().d;
        FieldSample {
            plus: f(h),
            minus: f(-h),
            nodes: self.nodes.iter().map(|&x| f(x)).collect(),
        }
    }

    fn amplitude(&self, a: &FieldSample, b: &FieldSample, c: &FieldSample, e: &FieldSample) -> f64 {
        match &self.gram {
            None => type_ii_amplitude(
                self.spec().n,
                self.spec().d,
                [a.plus, b.plus, c.plus, e.plus],
                [a.minus, b.minus, c.minus, e.minus],
            ),
            Some(gram) => {
                let m = self.nodes.len();
                let left = DVector::from_fn(m, |i, _| a.nodes[i] * b.nodes[i] * self.weights[i]);
                let right = DVector::from_fn(m, |i, _| c.nodes[i] * e.nodes[i] * self.weights[i]);
                left.dot(&(gram * right))
            }
        }
    }

    /// Amplitude of `E[C_{j,l}(0) C_{j',l'}(z)]` for guided indices.
    pub fn guided_amplitude(&self, j: usize, l: usize, j2: usize, l2: usize) -> f64 {
        let g = &self.guided;
        self.amplitude(&g[j], &g[l], &g[j2], &g[l2])
    }

    /// `sum_t` amplitude of `E[C_{j,t,gamma}(0) C_{j,t,gamma}(z)]`.
    pub fn radiation_amplitude(&self, j: usize, gamma: f64) -> Result<f64> {
        let spec = self.spec();
        let mut total = 0.0;
        for parity in [Parity::Even, Parity::Odd] {
            let mode = RadiatingMode::new(spec, parity, gamma)?;
            let sample = self.sample(|x| mode.eval(spec, x));
            let g = &self.guided[j];
            total += self.amplitude(g, &sample, g, &sample);
        }
        Ok(total)
    }

    fn mode(&self, j: usize) -> &GuidedMode {
        &self.basis.modes[j]
    }

    fn k4_over(&self, j: usize, l: usize) -> f64 {
        self.spec().k.powi(4) / (2.0 * self.mode(j).beta * self.mode(l).beta)
    }

    pub fn gamma_matrix(&self) -> DMatrix<f64> {
        let kernel = self.model.longitudinal();
        self.off_diagonal_with_antisum(|j, l| {
            let dbeta = self.mode(l).beta - self.mode(j).beta;
            self.k4_over(j, l) * self.guided_amplitude(j, l, j, l) * kernel.c_cos(dbeta)
        })
    }

    pub fn gamma_s_matrix(&self) -> DMatrix<f64> {
        let kernel = self.model.longitudinal();
        self.off_diagonal_with_antisum(|j, l| {
            let dbeta = self.mode(l).beta - self.mode(j).beta;
            self.k4_over(j, l) * self.guided_amplitude(j, l, j, l) * kernel.c_sin(dbeta)
        })
    }

    pub fn gamma1_matrix(&self) -> DMatrix<f64> {
        let n = self.basis.len();
        let c0 = self.model.longitudinal().c_cos(0.0);
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            for l in j..n {
                let v = self.k4_over(j, l) * self.guided_amplitude(j, j, l, l) * c0;
                out[(j, l)] = v;
                out[(l, j)] = v;
            }
        }
        out
    }

    fn off_diagonal_with_antisum<F: Fn(usize, usize) -> f64>(&self, entry: F) -> DMatrix<f64> {
        let n = self.basis.len();
        let mut out = DMatrix::zeros(n, n);
        for j in 0..n {
            for l in 0..n {
                if j != l {
                    out[(j, l)] = entry(j, l);
                }
            }
        }
        for j in 0..n {
            let sum: f64 = (0..n).filter(|&l| l != j).map(|l| out[(j, l)]).sum();
            out[(j, j)] = -sum;
        }
        out
    }

    /// `int_0^{k^2} ... dgamma` with `gamma = k^2 sin^2 u`, using `transform(sqrt(gamma) - beta_j)`.
    fn radiative_integral<T: Fn(f64) -> f64>(
        &self,
        j: usize,
        transform: T,
        opts: &CouplingOptions,
    ) -> Result<f64> {
        let k = self.spec().k;
        let beta = self.mode(j).beta;
        let mut failure = None;
        let integrand = |u: f64| {
            let (sin_u, cos_u) = u.sin_cos();
            let gamma = k * k * sin_u * sin_u;
            match self.radiation_amplitude(j, gamma) {
                Ok(amp) => k.powi(5) * cos_u / beta * amp * transform(k * sin_u - beta),
                Err(e) => {
                    failure.get_or_insert(e);
                    0.0
                }
            }
        };
        let quad = AdaptiveOptions {
            abs_tol: 1e-300,
            rel_tol: opts.rel_tol,
            max_intervals: 20_000,
            initial_panels: opts.radiative_panels.max(1),
        };
        let (value, _) = adaptive(integrand, 0.0, FRAC_PI_2, quad)?;
        match failure {
            Some(e) => Err(e),
            None => Ok(value),
        }
    }

    /// Leakage coefficients `Lambda_j`.
    pub fn lambda(&self, opts: &CouplingOptions) -> Result<DVector<f64>> {
        self.per_mode(|j| self.lambda_single(j, opts))
    }

    pub fn lambda_single(&self, j: usize, opts: &CouplingOptions) -> Result<f64> {
        let kernel = *self.model.longitudinal();
        self.radiative_integral(j, |b| kernel.c_cos(b), opts)
    }

    /// Radiative phase coefficients `Lambda^s_j`.
    pub fn lambda_s(&self, opts: &CouplingOptions) -> Result<DVector<f64>> {
        let kernel = *self.model.longitudinal();
        self.per_mode(|j| self.radiative_integral(j, |b| kernel.c_sin(b), opts))
    }

    /// `E[c_jj(0)]`.
    pub fn mean_second_order(&self, j: usize) -> f64 {
        match self.model {
            CovarianceModel::TypeI { .. } => 0.0,
            CovarianceModel::TypeII { kernel } => {
                let spec = self.spec();
                let m = self.mode(j);
                let h = 0.5 * spec.d;
                // d/dx [phi_j^2] at d/2
                let slope = 2.0 * m.eval(spec, h) * m.eval_dx_outside_edge(spec);
                (spec.n * spec.n - 1.0) * spec.d * spec.d * kernel.eval(0.0) * slope
            }
        }
    }

    /// Evanescent phase coefficients `kappa_j`.
    pub fn kappa(&self, opts: &CouplingOptions) -> Result<DVector<f64>> {
        self.per_mode(|j| self.kappa_single(j, opts))
    }

    fn kappa_single(&self, j: usize, opts: &CouplingOptions) -> Result<f64> {
        let spec = *self.spec();
        let kernel = *self.model.longitudinal();
        let (k, d) = (spec.k, spec.d);
        let beta = self.mode(j).beta;
        let mut failure = None;
        let mut integrand = |s: f64| match self.radiation_amplitude(j, -s * s) {
            Ok(amp) => k.powi(4) / beta * amp * kernel.c_lap(beta, s),
            Err(e) => {
                failure.get_or_insert(e);
                0.0
            }
        };
        let panel_width = 0.5 * PI / d;
        let quad = AdaptiveOptions {
            abs_tol: 1e-300,
            rel_tol: opts.rel_tol,
            max_intervals: 40_000,
            initial_panels: 1,
        };
        let body_end;
        let mut total = 0.0;
        match self.gram {
            None => {
                // boundary perturbations: the integrand decays like 1/s^2
                body_end = (4.0 * spec.n * k).max(60.0 / d);
                let panels = (body_end / panel_width).ceil() as usize;
                total += adaptive(
                    &mut integrand,
                    0.0,
                    body_end,
                    AdaptiveOptions {
                        initial_panels: panels,
                        ..quad
                    },
                )?
                .0;
                total += adaptive(
                    |t: f64| {
                        if t <= 0.0 {
                            return 0.0;
                        }
                        let s = body_end / t;
                        integrand(s) * body_end / (t * t)
                    },
                    0.0,
                    1.0,
                    AdaptiveOptions {
                        initial_panels: 8,
                        ..quad
                    },
                )?
                .0;
            }
            Some(_) => {
                // stop where the transverse rule no longer resolves the radiating field
                let eta_max = 1.5 * self.nodes.len() as f64 - self.mode(j).sigma;
                let s2 = (eta_max / d).powi(2) - (spec.n * k).powi(2);
                body_end = if s2 > 0.0 { s2.sqrt() } else { 0.0 };
                if body_end == 0.0 {
                    log::warn!(
                        "transverse order too low to resolve evanescent coupling for mode {j}"
                    );
                }
                let panels = ((body_end / panel_width).ceil() as usize).max(1);
                total += adaptive(
                    &mut integrand,
                    0.0,
                    body_end,
                    AdaptiveOptions {
                        initial_panels: panels,
                        ..quad
                    },
                )?
                .0;
            }
        }
        if let Some(e) = failure {
            return Err(e);
        }
        Ok(total + k * k / (2.0 * beta) * self.mean_second_order(j))
    }

    fn per_mode<F>(&self, f: F) -> Result<DVector<f64>>
    where
        F: Fn(usize) -> Result<f64> + Sync + Send,
    {
        let values: Result<Vec<f64>> = map_indices(self.basis.len(), f).into_iter().collect();
        Ok(DVector::from_vec(values?))
    }
}

/// Covariance of the guided coupling coefficients `(j,l)` and `(j2,l2)`.
pub fn mode_coupling_covariance(
    basis: &ModeBasis,
    model: &CovarianceModel,
    j: usize,
    l: usize,
    j2: usize,
    l2: usize,
) -> Result<ZCovariance> {
    let n = basis.len();
    for idx in [j, l, j2, l2] {
        if idx >= n {
            return Err(Error::Dimension {
                expected: n,
                got: idx,
            });
        }
    }
    let ctx = CouplingContext::new(basis, model, &CouplingOptions::default())?;
    Ok(ZCovariance {
        amplitude: ctx.guided_amplitude(j, l, j2, l2),
        kernel: *model.longitudinal(),
    })
}

/// All coefficients of the limiting diffusion for the guided amplitudes.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingSet {
    pub gamma: DMatrix<f64>,
    pub gamma_s: DMatrix<f64>,
    pub gamma1: DMatrix<f64>,
    pub lambda: DVector<f64>,
    pub lambda_s: DVector<f64>,
    pub kappa: DVector<f64>,
}

impl CouplingSet {
    pub fn compute(
        basis: &ModeBasis,
        model: &CovarianceModel,
        opts: &CouplingOptions,
    ) -> Result<Self> {
        let ctx = CouplingContext::new(basis, model, opts)?;
        Ok(Self {
            gamma: ctx.gamma_matrix(),
            gamma_s: ctx.gamma_s_matrix(),
            gamma1: ctx.gamma1_matrix(),
            lambda: ctx.lambda(opts)?,
            lambda_s: ctx.lambda_s(opts)?,
            kappa: ctx.kappa(opts)?,
        })
    }

    /// Power-exchange rates and leakage only; all phase terms zero.
    pub fn from_rates(gamma: DMatrix<f64>, lambda: DVector<f64>) -> Result<Self> {
        let n = lambda.len();
        if gamma.nrows() != n || gamma.ncols() != n {
            return Err(Error::Dimension {
                expected: n,
                got: gamma.nrows(),
            });
        }
        Ok(Self {
            gamma,
            gamma_s: DMatrix::zeros(n, n),
            gamma1: DMatrix::zeros(n, n),
            lambda,
            lambda_s: DVector::zeros(n),
            kappa: DVector::zeros(n),
        })
    }

    /// Generator with the given symmetric off-diagonal rates; the diagonal is
    /// overwritten by the negative row sums.
    pub fn generator_from_rates(rates: &DMatrix<f64>) -> DMatrix<f64> {
        let n = rates.nrows();
        let mut gamma = rates.clone();
        for j in 0..n {
            let sum: f64 = (0..n).filter(|&l| l != j).map(|l| rates[(j, l)]).sum();
            gamma[(j, j)] = -sum;
        }
        gamma
    }

    pub fn len(&self) -> usize {
        self.lambda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambda.is_empty()
    }

    /// `A = Gamma - diag(Lambda)`.
    pub fn mean_operator(&self) -> DMatrix<f64> {
        &self.gamma - DMatrix::from_diagonal(&self.lambda)
    }

    /// Checks symmetry, nonnegative off-diagonals and zero row sums of `Gamma`.
    pub fn validate_generator(&self) -> Result<()> {
        let n = self.len();
        let scale = self.gamma.amax().max(f64::MIN_POSITIVE);
        for j in 0..n {
            let mut sum = 0.0;
            for l in 0..n {
                let g = self.gamma[(j, l)];
                if !g.is_finite() {
                    return Err(Error::InvalidGenerator(format!(
                        "entry ({j},{l}) is not finite"
                    )));
                }
                if j != l && g < -1e-12 * scale {
                    return Err(Error::InvalidGenerator(format!(
                        "negative rate {g} at ({j},{l})"
                    )));
                }
                if (g - self.gamma[(l, j)]).abs() > 1e-12 * scale {
                    return Err(Error::InvalidGenerator(format!("asymmetric at ({j},{l})")));
                }
                sum += g;
            }
            if sum.abs() > 1e-10 * scale {
                return Err(Error::InvalidGenerator(format!("row {j} sums to {sum}")));
            }
        }
        for (j, &v) in self.lambda.iter().enumerate() {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidGenerator(format!(
                    "Lambda_{j} = {v} is negative"
                )));
            }
        }
        Ok(())
    }

    pub fn to_document(&self) -> CouplingDocument {
        let rows = |m: &DMatrix<f64>| {
            (0..m.nrows())
                .map(|r| m.row(r).iter().copied().collect())
                .collect()
        };
        CouplingDocument {
            schema: COUPLING_SCHEMA.to_string(),
            n_modes: self.len(),
            gamma: rows(&self.gamma),
            gamma_s: rows(&self.gamma_s),
            gamma1: rows(&self.gamma1),
            lambda: self.lambda.iter().copied().collect(),
            lambda_s: self.lambda_s.iter().copied().collect(),
            kappa: self.kappa.iter().copied().collect(),
        }
    }

    pub fn from_document(doc: &CouplingDocument) -> Result<Self> {
        if doc.schema != COUPLING_SCHEMA {
            return Err(invalid(
                "schema",
                format!("expected {COUPLING_SCHEMA}, got {}", doc.schema),
            ));
        }
        let n = doc.n_modes;
        let matrix = |rows: &Vec<Vec<f64>>, key: &str| -> Result<DMatrix<f64>> {
            if rows.len() != n || rows.iter().any(|r| r.len() != n) {
                return Err(invalid(key, format!("must be {n}x{n}")));
            }
            Ok(DMatrix::from_fn(n, n, |r, c| rows[r][c]))
        };
        let vector = |v: &Vec<f64>, key: &str| -> Result<DVector<f64>> {
            if v.len() != n {
                return Err(invalid(key, format!("must have length {n}")));
            }
            Ok(DVector::from_column_slice(v))
        };
        Ok(Self {
            gamma: matrix(&doc.gamma, "gamma")?,
            gamma_s: matrix(&doc.gamma_s, "gamma_s")?,
            gamma1: matrix(&doc.gamma1, "gamma1")?,
            lambda: vector(&doc.lambda, "lambda")?,
            lambda_s: vector(&doc.lambda_s, "lambda_s")?,
            kappa: vector(&doc.kappa, "kappa")?,
        })
    }
}

/// Serialized form of a [`CouplingSet`]; matrices are row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingDocument {
    pub schema: String,
    pub n_modes: usize,
    pub gamma: Vec<Vec<f64>>,
    pub gamma_s: Vec<Vec<f64>>,
    pub gamma1: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub lambda_s: Vec<f64>,
    pub kappa: Vec<f64>,
}
