//! Nearest-neighbour rates, the limiting diffusion coefficient and
//! finite-difference Sturm-Liouville eigenproblems on the unit interval,
//! square and triangle.
//!
//! Rates follow the physical convention of [`CouplingSet`]: the limiting
//! coefficient `gamma_inf(u)` is approached by `Gamma_{j,j+1} / k^2` at
//! `j = floor(u N)`.

use std::f64::consts::{FRAC_1_SQRT_2, PI, SQRT_2};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coupling::{
    CouplingContext, CouplingOptions, CouplingSet, CovarianceModel, TransverseKernel,
};
use crate::error::{invalid, Error, Result};
use crate::kernel::CovarianceKernel1D;
use crate::linalg::SparseMatrix;
use crate::mode_solver::{ModeBasis, WaveguideSpec};
use crate::moments::TriangleIndex;
use crate::quadrature::{adaptive, AdaptiveOptions, GaussLegendre};
use crate::spectral::{growth_rates, perron_pair_sparse};

pub const MIN_GRID: usize = 16;
/// Premise threshold on `max_j Gamma_{j,j+2} / Gamma_{j,j+1}`.
pub const NEAREST_NEIGHBOR_PREMISE: f64 = 1e-3;

/// Argument of the longitudinal transform in the limiting coefficient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spacing {
    /// `pi sqrt(n^2-1) u / (n d)`, the small-`u` form of the wavenumber spacing.
    #[default]
    SmallArgument,
    /// `pi u / (d sqrt(n^2/(n^2-1) - u^2))`, the large-`N` limit of `beta_j - beta_{j+1}`.
    Exact,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum GammaProfile {
    Constant {
        value: f64,
    },
    #[serde(rename = "type1")]
    TypeI {
        n: f64,
        d: f64,
        transverse: TransverseKernel,
        longitudinal: CovarianceKernel1D,
        #[serde(default)]
        spacing: Spacing,
    },
    #[serde(rename = "type2")]
    TypeII {
        n: f64,
        d: f64,
        kernel: CovarianceKernel1D,
        #[serde(default)]
        spacing: Spacing,
    },
}

/// Evaluator for `gamma_inf` with the type I transverse overlap precomputed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaInfinity {
    profile: GammaProfile,
    overlap: f64,
}

impl GammaInfinity {
    pub fn new(profile: GammaProfile) -> Result<Self> {
        let check_geometry = |n: f64, d: f64| WaveguideSpec::new(n, d, 1.0, 0.0).map(|_| ());
        let overlap = match profile {
            GammaProfile::Constant { value } => {
                if !(value.is_finite() && value > 0.0) {
                    return Err(invalid(
                        "continuum.gamma.value",
                        format!("must be > 0, got {value}"),
                    ));
                }
                0.0
            }
            GammaProfile::TypeI {
                n,
                d,
                transverse,
                longitudinal,
                ..
            } => {
                check_geometry(n, d)?;
                CovarianceModel::TypeI {
                    transverse,
                    longitudinal,
                }
                .validate()?;
                sine_overlap(&transverse, d)
            }
            GammaProfile::TypeII { n, d, kernel, .. } => {
                check_geometry(n, d)?;
                kernel.validate("perturbation")?;
                0.0
            }
        };
        Ok(Self { profile, overlap })
    }

    pub fn constant(value: f64) -> Result<Self> {
        Self::new(GammaProfile::Constant { value })
    }

    pub fn profile(&self) -> &GammaProfile {
        &self.profile
    }

    /// `gamma_inf(u)` for `u` in `(0, 1)`.
    pub fn eval(&self, u: f64) -> Result<f64> {
        if !(u > 0.0 && u < 1.0) {
            return Err(Error::Domain {
                value: u,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(self.eval_interior(u))
    }

    fn eval_interior(&self, u: f64) -> f64 {
        let argument = |n: f64, d: f64, spacing: Spacing| {
            let contrast = n * n - 1.0;
            match spacing {
                Spacing::SmallArgument => PI * contrast.sqrt() * u / (n * d),
                Spacing::Exact => PI * u / (d * (n * n / contrast - u * u).sqrt()),
            }
        };
        match self.profile {
            GammaProfile::Constant { value } => value,
            GammaProfile::TypeI {
                n,
                d,
                longitudinal,
                spacing,
                ..
            } => {
                let contrast = n * n - 1.0;
                let transform = longitudinal.fourier(argument(n, d, spacing));
                transform * self.overlap / (4.0 * contrast * d * d * (n * n / contrast - u * u))
            }
            GammaProfile::TypeII {
                n,
                d,
                kernel,
                spacing,
            } => {
                let contrast = n * n - 1.0;
                let transform = kernel.fourier(argument(n, d, spacing));
                2.0 * contrast * u.powi(4) / (n * n / contrast - u * u) * transform
            }
        }
    }
}

/// `int int R_c(x, x') sin(pi x / d) sin(pi x' / d)` over the core.
fn sine_overlap(transverse: &TransverseKernel, d: f64) -> f64 {
    let rule = GaussLegendre::new(64);
    let points: Vec<(f64, f64)> = rule.mapped(-0.5 * d, 0.5 * d).collect();
    let mut total = 0.0;
    for &(x, wx) in &points {
        for &(y, wy) in &points {
            total += wx * wy * transverse.eval(x, y, d) * (PI * x / d).sin() * (PI * y / d).sin();
        }
    }
    total
}

/// Banded rates `Gamma_{j,j+1}` and the leakage of the last mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestNeighborRates {
    pub k: f64,
    pub rates: Vec<f64>,
    /// Leakage of mode `N-1`; all other modes are taken as lossless.
    pub absorption: f64,
    /// `max_j Gamma_{j,j+2} / Gamma_{j,j+1}`.
    pub premise_ratio: f64,
}

impl NearestNeighborRates {
    pub fn n_modes(&self) -> usize {
        self.rates.len() + 1
    }

    /// `Gamma_{j,j+1} / k^2`, comparable with `gamma_inf`.
    pub fn continuum_rates(&self) -> Vec<f64> {
        self.rates.iter().map(|g| g / (self.k * self.k)).collect()
    }

    pub fn coupling(&self) -> Result<CouplingSet> {
        banded_coupling(&self.rates, self.absorption)
    }
}

/// Tridiagonal generator with the given neighbour rates and absorption at the last mode.
pub fn banded_coupling(rates: &[f64], absorption: f64) -> Result<CouplingSet> {
    let n = rates.len() + 1;
    let mut off = DMatrix::zeros(n, n);
    for (j, &g) in rates.iter().enumerate() {
        off[(j, j + 1)] = g;
        off[(j + 1, j)] = g;
    }
    let mut lambda = DVector::zeros(n);
    lambda[n - 1] = absorption;
    CouplingSet::from_rates(CouplingSet::generator_from_rates(&off), lambda)
}

pub fn nearest_neighbor_rates(
    basis: &ModeBasis,
    model: &CovarianceModel,
    opts: &CouplingOptions,
) -> Result<NearestNeighborRates> {
    let ctx = CouplingContext::new(basis, model, opts)?;
    let spec = &basis.spec;
    let kernel = model.longitudinal();
    let n = basis.len();
    let contrast = spec.n * spec.n - 1.0;
    let edges = basis.edge_values();
    let betas = basis.betas();
    let rate = |j: usize, l: usize| {
        let prefactor = spec.k.powi(4) / (2.0 * betas[j] * betas[l]);
        let transform = kernel.fourier(betas[j] - betas[l]);
        match model {
            CovarianceModel::TypeII { .. } => {
                prefactor
                    * contrast
                    * contrast
                    * spec.d
                    * spec.d
                    * (edges[j] * edges[l]).powi(2)
                    * transform
            }
            CovarianceModel::TypeI { .. } => {
                0.5 * prefactor * ctx.guided_amplitude(j, l, j, l) * transform
            }
        }
    };
    let rates: Vec<f64> = (0..n.saturating_sub(1)).map(|j| rate(j, j + 1)).collect();
    let premise_ratio = (0..n.saturating_sub(2))
        .filter(|&j| rates[j] > 0.0)
        .map(|j| rate(j, j + 2) / rates[j])
        .fold(0.0, f64::max);
    if premise_ratio > NEAREST_NEIGHBOR_PREMISE {
        log::warn!(
            "next-nearest coupling ratio {premise_ratio:.3e} exceeds {NEAREST_NEIGHBOR_PREMISE:e}; banded approximation is poor"
        );
    }
    let absorption = if n == 0 {
        0.0
    } else {
        ctx.lambda_single(n - 1, opts)?
    };
    Ok(NearestNeighborRates {
        k: spec.k,
        rates,
        absorption,
        premise_ratio,
    })
}

/// Conservative vertex-centred discretization of `d/du (gamma d/du)` on
/// `u_i = i / M`, `i < M`, with a mirrored ghost node at `u = 0` and the
/// Dirichlet node `u = 1` eliminated. Stored in the symmetric form
/// `D^{-1/2} K D^{-1/2}` with `D = diag(1/2, 1, ..., 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SturmLiouville1D {
    pub m: usize,
    diag: Vec<f64>,
    /// `off[i]` couples nodes `i` and `i + 1`.
    off: Vec<f64>,
    /// `gamma((i + 1/2) h) / h^2`; the last entry links to the Dirichlet node.
    flux: Vec<f64>,
}

impl SturmLiouville1D {
    pub fn new(gamma: &GammaInfinity, m: usize) -> Result<Self> {
        if m < MIN_GRID {
            return Err(invalid(
                "continuum.m",
                format!("must be >= {MIN_GRID}, got {m}"),
            ));
        }
        let h = 1.0 / m as f64;
        let flux: Vec<f64> = (0..m)
            .map(|i| gamma.eval_interior((i as f64 + 0.5) * h) / (h * h))
            .collect();
        let mut diag = vec![0.0; m];
        let mut off = vec![0.0; m - 1];
        for i in 0..m {
            diag[i] = -flux[i] - if i > 0 { flux[i - 1] } else { 0.0 };
            if i + 1 < m {
                off[i] = flux[i];
            }
        }
        // half control volume at the Neumann end
        diag[0] *= 2.0;
        off[0] *= SQRT_2;
        Ok(Self { m, diag, off, flux })
    }

    /// `-x^T A x` for the symmetric form `A`, summed as nonnegative edge
    /// terms so that small eigenvalues keep full relative accuracy.
    pub fn energy(&self, x: &[f64]) -> f64 {
        self.fiber_energy(x.len(), |i| x[i])
    }

    fn fiber_energy(&self, m: usize, x: impl Fn(usize) -> f64) -> f64 {
        let phi = |i: usize| x(i) / Self::weight_sqrt(i);
        let interior: f64 = (0..m - 1)
            .map(|i| self.flux[i] * (phi(i) - phi(i + 1)).powi(2))
            .sum();
        interior + self.flux[m - 1] * phi(m - 1).powi(2)
    }

    /// Energy of the Kronecker sum on a row-major square vector.
    pub fn square_energy(&self, x: &[f64]) -> f64 {
        let m = self.m;
        (0..m)
            .map(|k| {
                self.fiber_energy(m, |i| x[i * m + k]) + self.fiber_energy(m, |i| x[k * m + i])
            })
            .sum()
    }

    /// Decay rate `energy / |x|^2` of a vector of the symmetric form.
    pub fn rayleigh_rate(&self, x: &[f64]) -> f64 {
        self.energy(x) / x.iter().map(|v| v * v).sum::<f64>()
    }

    fn weight_sqrt(i: usize) -> f64 {
        if i == 0 {
            FRAC_1_SQRT_2
        } else {
            1.0
        }
    }

    pub fn matrix(&self) -> SparseMatrix {
        let mut t = Vec::with_capacity(3 * self.m);
        for i in 0..self.m {
            t.push((i, i, self.diag[i]));
            if i + 1 < self.m {
                t.push((i, i + 1, self.off[i]));
                t.push((i + 1, i, self.off[i]));
            }
        }
        SparseMatrix::from_triplets(self.m, t)
    }

    pub fn grid(&self) -> Vec<f64> {
        (0..self.m).map(|i| i as f64 / self.m as f64).collect()
    }

    /// Nodal values with unit trapezoidal `L^2` norm from a unit vector of the symmetric form.
    pub fn nodal_values(&self, v: &DVector<f64>) -> Vec<f64> {
        let h = 1.0 / self.m as f64;
        v.iter()
            .enumerate()
            .map(|(i, x)| x / (Self::weight_sqrt(i) * h.sqrt()))
            .collect()
    }

    /// Inverse of [`Self::nodal_values`] up to normalization.
    pub fn from_nodal(&self, values: &[f64]) -> DVector<f64> {
        DVector::from_fn(self.m, |i, _| values[i] * Self::weight_sqrt(i))
    }

    fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let left = (i > 0).then(|| (i - 1, self.off[i - 1]));
        let right = (i + 1 < self.m).then(|| (i + 1, self.off[i]));
        std::iter::once((i, self.diag[i])).chain(left).chain(right)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H1Solution {
    pub m: usize,
    /// `lambda_cont` on the `M` grid.
    pub lambda: f64,
    /// Same on the `2M` grid.
    pub lambda_fine: f64,
    /// `(4 lambda_fine - lambda) / 3`.
    pub lambda_extrapolated: f64,
    pub separation: f64,
    pub u: Vec<f64>,
    /// Positive eigenfunction with unit `L^2` norm, at `u`.
    pub phi: Vec<f64>,
}

fn h1_single(
    gamma: &GammaInfinity,
    m: usize,
) -> Result<(SturmLiouville1D, f64, DVector<f64>, f64)> {
    let op = SturmLiouville1D::new(gamma, m)?;
    let pair = perron_pair_sparse(&op.matrix())?;
    let lambda = op.rayleigh_rate(pair.vector.as_slice());
    Ok((op, lambda, pair.vector, pair.separation))
}

pub fn h1_eigenproblem(gamma: &GammaInfinity, m: usize) -> Result<H1Solution> {
    let (op, lambda, vector, separation) = h1_single(gamma, m)?;
    let (_, lambda_fine, _, _) = h1_single(gamma, 2 * m)?;
    Ok(H1Solution {
        m,
        lambda,
        lambda_fine,
        lambda_extrapolated: (4.0 * lambda_fine - lambda) / 3.0,
        separation,
        u: op.grid(),
        phi: op.nodal_values(&vector),
    })
}

/// Admissible functions on `[0, 1]` for the Rayleigh quotient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TrialFunction {
    /// `cos(pi u / 2)`.
    Cosine,
    /// `sum_i c_i u^i`.
    Polynomial { coefficients: Vec<f64> },
}

impl TrialFunction {
    pub fn value(&self, u: f64) -> f64 {
        match self {
            TrialFunction::Cosine => (0.5 * PI * u).cos(),
            TrialFunction::Polynomial { coefficients } => {
                coefficients.iter().rev().fold(0.0, |acc, c| acc * u + c)
            }
        }
    }

    pub fn derivative(&self, u: f64) -> f64 {
        match self {
            TrialFunction::Cosine => -0.5 * PI * (0.5 * PI * u).sin(),
            TrialFunction::Polynomial { coefficients } => coefficients
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (i, c)| acc * u + i as f64 * c),
        }
    }
}

/// `int gamma phi'^2 / int phi^2`; requires `phi(1) = 0`. A nonzero slope at
/// `u = 0` is allowed because the Neumann condition is natural for the quotient.
pub fn rayleigh_quotient(gamma: &GammaInfinity, trial: &TrialFunction) -> Result<f64> {
    let scale = (0..=8)
        .map(|i| trial.value(i as f64 / 8.0).abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    if trial.value(1.0).abs() > 1e-12 * scale {
        return Err(Error::TrialFunction(format!(
            "phi(1) = {} is not zero",
            trial.value(1.0)
        )));
    }
    if trial.derivative(0.0).abs() > 1e-12 * scale {
        log::warn!(
            "trial function has phi'(0) = {}; using it as an H1 test function",
            trial.derivative(0.0)
        );
    }
    let opts = AdaptiveOptions {
        abs_tol: 1e-15,
        rel_tol: 1e-12,
        ..AdaptiveOptions::default()
    };
    let (norm, _) = adaptive(|u| trial.value(u).powi(2), 0.0, 1.0, opts)?;
    if norm.is_nan() || norm <= 0.0 {
        return Err(Error::TrialFunction("zero L2 norm".into()));
    }
    let (energy, _) = adaptive(
        |u| {
            if u <= 0.0 || u >= 1.0 {
                0.0
            } else {
                gamma.eval_interior(u) * trial.derivative(u).powi(2)
            }
        },
        0.0,
        1.0,
        opts,
    )?;
    Ok(energy / norm)
}

/// Upper bounds on `lambda_cont`, one per trial function.
pub fn variational_lambda(gamma: &GammaInfinity, trials: &[TrialFunction]) -> Result<Vec<f64>> {
    trials.iter().map(|t| rayleigh_quotient(gamma, t)).collect()
}

/// Kronecker sum of the 1D operator with itself on the square grid, row-major.
pub fn square_operator(op: &SturmLiouville1D) -> SparseMatrix {
    let m = op.m;
    let mut t = Vec::with_capacity(5 * m * m);
    for i in 0..m {
        for k in 0..m {
            let row = i * m + k;
            for (i2, v) in op.row_entries(i) {
                t.push((row, i2 * m + k, v));
            }
            for (k2, v) in op.row_entries(k) {
                t.push((row, i * m + k2, v));
            }
        }
    }
    SparseMatrix::from_triplets(m * m, t)
}

/// Restriction of the square operator to functions symmetric in `(u, v)`,
/// in the orthonormal basis `e_ii`, `(e_ik + e_ki)/sqrt(2)` for `i < k`. This is
/// the triangle `u <= v` with the diagonal handled by mirror reflection.
pub fn triangle_operator(op: &SturmLiouville1D) -> SparseMatrix {
    let m = op.m;
    let index = TriangleIndex::new(m);
    let coefficient = |i: usize, k: usize| if i == k { 1.0 } else { FRAC_1_SQRT_2 };
    let mut t = Vec::new();
    for (col, (i, k)) in index.pairs().enumerate() {
        // square points carried by basis vector `col`
        let mut support = vec![(i, k)];
        if i != k {
            support.push((k, i));
        }
        let c = coefficient(i, k);
        for (a, b) in support {
            for (a2, v) in op.row_entries(a) {
                t.push((index.index(a2, b), col, c * coefficient(a2, b) * v));
            }
            for (b2, v) in op.row_entries(b) {
                t.push((index.index(a, b2), col, c * coefficient(a, b2) * v));
            }
        }
    }
    SparseMatrix::from_triplets(index.len(), t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct H2Solution {
    pub m: usize,
    pub lambda: f64,
    /// `2 lambda` from the 1D spectrum.
    pub mu_tensor: f64,
    /// Top of the assembled square operator.
    pub mu_square: f64,
    /// Top of the triangle operator.
    pub mu_triangle: f64,
    /// `|H2 (phi x phi) + 2 lambda (phi x phi)|` in the discrete symmetric form.
    pub product_residual: f64,
    pub u: Vec<f64>,
    /// Square eigenfunction, row-major over `(u_i, v_k)`, unit `L^2` norm.
    pub psi_square: Vec<f64>,
    /// Triangle eigenfunction `sqrt(2) psi_square` at `u_i <= v_k`, triangle order.
    pub psi_triangle: Vec<f64>,
}

pub fn h2_eigenproblem(gamma: &GammaInfinity, m: usize) -> Result<H2Solution> {
    let (op, lambda, phi_vec, _) = h1_single(gamma, m)?;
    let square = square_operator(&op);
    let sq = perron_pair_sparse(&square)?;
    let tri = perron_pair_sparse(&triangle_operator(&op))?;

    let product = DVector::from_fn(m * m, |r, _| phi_vec[r / m] * phi_vec[r % m]);
    let product_residual = (square.apply(&product) + &product * (2.0 * lambda)).norm();

    let h = 1.0 / m as f64;
    let w = |i: usize| SturmLiouville1D::weight_sqrt(i);
    let psi_square: Vec<f64> = (0..m * m)
        .map(|r| sq.vector[r] / (w(r / m) * w(r % m) * h))
        .collect();
    let index = TriangleIndex::new(m);
    let mut tri_square = vec![0.0; m * m];
    for (p, (i, k)) in index.pairs().enumerate() {
        let v = if i == k {
            tri.vector[p]
        } else {
            tri.vector[p] * FRAC_1_SQRT_2
        };
        tri_square[i * m + k] = v;
        tri_square[k * m + i] = v;
    }
    let psi_triangle: Vec<f64> = index
        .pairs()
        .enumerate()
        .map(|(p, (i, k))| {
            let symmetric = if i == k {
                tri.vector[p]
            } else {
                tri.vector[p] * FRAC_1_SQRT_2
            };
            SQRT_2 * symmetric / (w(i) * w(k) * h)
        })
        .collect();
    Ok(H2Solution {
        m,
        lambda,
        mu_tensor: 2.0 * lambda,
        mu_square: op.square_energy(sq.vector.as_slice()) / sq.vector.norm_squared(),
        mu_triangle: op.square_energy(&tri_square) / tri_square.iter().map(|v| v * v).sum::<f64>(),
        product_residual,
        u: op.grid(),
        psi_square,
        psi_triangle,
    })
}

/// Family of banded systems indexed by the number of modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum FiniteNFamily {
    /// `Gamma_{j,j+1} = gamma_inf((j + 1/2) / N)`.
    Profile {
        gamma: GammaProfile,
        absorption: f64,
    },
    /// Physical slab at `k` chosen so that `V = (N - 1/2) pi`.
    Waveguide {
        n: f64,
        d: f64,
        perturbation: CovarianceModel,
        #[serde(default)]
        numerics: CouplingOptions,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub n: usize,
    pub lambda: f64,
    pub mu: f64,
    pub gap: f64,
    /// `|gap| / lambda`.
    pub relative_gap: f64,
    /// `N^2 lambda / s` with `s = k^2` for waveguides and `1` for profiles.
    pub scaled_lambda: f64,
    /// Max deviation of `sqrt(N) V_j` from `phi(j/N)`.
    pub mean_profile_error: f64,
    /// Max deviation of `W` from the normalized `phi(j/N) phi(l/N)`.
    pub second_profile_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub lambda_cont: Option<f64>,
    pub rows: Vec<ConvergenceRow>,
}

fn family_system(
    family: &FiniteNFamily,
    n: usize,
) -> Result<(NearestNeighborRates, Option<GammaInfinity>)> {
    match family {
        FiniteNFamily::Profile { gamma, absorption } => {
            let g = GammaInfinity::new(*gamma)?;
            let rates = (0..n - 1)
                .map(|j| g.eval_interior((j as f64 + 0.5) / n as f64))
                .collect();
            Ok((
                NearestNeighborRates {
                    k: 1.0,
                    rates,
                    absorption: *absorption,
                    premise_ratio: 0.0,
                },
                Some(g),
            ))
        }
        FiniteNFamily::Waveguide {
            n: index,
            d,
            perturbation,
            numerics,
        } => {
            let contrast = (index * index - 1.0).sqrt();
            let k = (n as f64 - 0.5) * PI / (contrast * d);
            let basis = ModeBasis::new(WaveguideSpec::new(*index, *d, k, 0.0)?)?;
            if basis.len() != n {
                return Err(Error::Dimension {
                    expected: n,
                    got: basis.len(),
                });
            }
            let gamma = match perturbation {
                CovarianceModel::TypeI {
                    transverse,
                    longitudinal,
                } => GammaProfile::TypeI {
                    n: *index,
                    d: *d,
                    transverse: *transverse,
                    longitudinal: *longitudinal,
                    spacing: Spacing::Exact,
                },
                CovarianceModel::TypeII { kernel } => GammaProfile::TypeII {
                    n: *index,
                    d: *d,
                    kernel: *kernel,
                    spacing: Spacing::Exact,
                },
            };
            Ok((
                nearest_neighbor_rates(&basis, perturbation, numerics)?,
                Some(GammaInfinity::new(gamma)?),
            ))
        }
    }
}

/// Decay rates of banded systems over increasing `N`, against the continuum.
pub fn finite_n_convergence(
    family: &FiniteNFamily,
    ns: &[usize],
    m: usize,
) -> Result<ConvergenceTable> {
    if let Some(&bad) = ns.iter().find(|&&n| n < 2) {
        return Err(invalid(
            "convergence.n_values",
            format!("each N must be >= 2, got {bad}"),
        ));
    }
    let mut lambda_cont = None;
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let (system, gamma) = family_system(family, n)?;
        let continuum = match &gamma {
            Some(g) => Some(h1_eigenproblem(g, m)?),
            None => None,
        };
        lambda_cont = continuum.as_ref().map(|c| c.lambda_extrapolated);
        let spectral = growth_rates(&system.coupling()?)?;
        let nf = n as f64;
        let (mean_profile_error, second_profile_error) = match &continuum {
            Some(c) => profile_errors(c, &spectral.v, &spectral.w),
            None => (f64::NAN, f64::NAN),
        };
        rows.push(ConvergenceRow {
            n,
            lambda: spectral.lambda,
            mu: spectral.mu,
            gap: spectral.gap,
            relative_gap: spectral.gap.abs() / spectral.lambda,
            scaled_lambda: nf * nf * spectral.lambda / (system.k * system.k),
            mean_profile_error,
            second_profile_error,
        });
    }
    Ok(ConvergenceTable { lambda_cont, rows })
}

/// Linear interpolation of nodal values on `u_i = i/M`, zero at `u = 1`.
fn interpolate(solution: &H1Solution, u: f64) -> f64 {
    let m = solution.m;
    let x = u * m as f64;
    let i = (x.floor() as usize).min(m - 1);
    let t = x - i as f64;
    let right = if i + 1 < m { solution.phi[i + 1] } else { 0.0 };
    (1.0 - t) * solution.phi[i] + t * right
}

fn profile_errors(continuum: &H1Solution, v: &DVector<f64>, w: &DVector<f64>) -> (f64, f64) {
    let n = v.len();
    let phi: Vec<f64> = (0..n)
        .map(|j| interpolate(continuum, j as f64 / n as f64))
        .collect();
    let phi_norm = phi.iter().map(|p| p * p).sum::<f64>().sqrt();
    let mean = (0..n)
        .map(|j| (v[j] - phi[j] / phi_norm).abs())
        .fold(0.0, f64::max);
    let index = TriangleIndex::new(n);
    let product: Vec<f64> = index.pairs().map(|(j, l)| phi[j] * phi[l]).collect();
    let product_norm = product.iter().map(|p| p * p).sum::<f64>().sqrt();
    let second = product
        .iter()
        .zip(w.iter())
        .map(|(p, w)| (w - p / product_norm).abs())
        .fold(0.0, f64::max);
    (mean, second)
}
