//! Perron pairs of the mean and second-moment generators, asymptotic profiles,
//! intensity moments and the weak-dissipation / weak-coupling expansions.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::coupling::CouplingSet;
use crate::error::{Error, Result};
use crate::linalg::{dense_top, lanczos_top, SparseMatrix, TopEigen};
use crate::mode_solver::ModeBasis;
use crate::moments::{
    assemble_triangle, initial_mean, initial_second, intensity_weights, triangle_generator_sparse,
    TriangleIndex,
};

/// Matrices up to this dimension use a dense eigendecomposition.
pub const DENSE_LIMIT: usize = 600;
/// Minimal separation between the two largest eigenvalues, relative to `max(1, |M|)`.
pub const DEGENERACY_TOL: f64 = 1e-12;
/// Allowed positive excess of `mu - 2 lambda`, relative to `1 + |mu|`.
pub const GAP_TOL: f64 = 1e-10;
const LANCZOS_STEPS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct PerronPair {
    pub value: f64,
    /// Unit vector with nonnegative entries.
    pub vector: DVector<f64>,
    /// Distance to the second largest eigenvalue (infinite in dimension one).
    pub separation: f64,
    /// `|M v - value v|`.
    pub residual: f64,
}

/// Top eigenpair of a symmetric matrix with irreducible off-diagonal pattern.
pub fn perron_pair(m: &DMatrix<f64>) -> Result<PerronPair> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension {
            expected: m.nrows(),
            got: m.ncols(),
        });
    }
    perron_pair_sparse(&SparseMatrix::from_dense(m))
}

pub fn perron_pair_sparse(m: &SparseMatrix) -> Result<PerronPair> {
    let n = m.dim();
    if n == 0 {
        return Err(Error::Dimension {
            expected: 1,
            got: 0,
        });
    }
    let norm = m.norm_inf();
    if m.max_asymmetry() > 1e-12 * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::InvalidGenerator("matrix is not symmetric".into()));
    }
    if !m.is_irreducible() {
        return Err(Error::Reducible);
    }
    let top: TopEigen = if n <= DENSE_LIMIT {
        dense_top(&m.to_dense())
    } else {
        lanczos_top(m, LANCZOS_STEPS)?
    };
    let separation = top.second.map_or(f64::INFINITY, |s| top.value - s);
    if separation < DEGENERACY_TOL * norm.max(1.0) {
        return Err(Error::DegenerateTop { separation });
    }
    let vector = positive_normalized(top.vector)?;
    let residual = (m.apply(&vector) - &vector * top.value).norm();
    if residual > 1e-10 * norm.max(f64::MIN_POSITIVE) {
        return Err(Error::Solve(format!(
            "Perron residual {residual:e} exceeds 1e-10 |M| = {norm:e}"
        )));
    }
    Ok(PerronPair {
        value: top.value,
        vector,
        separation,
        residual,
    })
}

fn positive_normalized(mut v: DVector<f64>) -> Result<DVector<f64>> {
    let imax = v.iamax();
    if v[imax] < 0.0 {
        v.neg_mut();
    }
    v /= v.norm();
    if let Some(bad) = v.iter().find(|&&x| x < -1e-10) {
        return Err(Error::Solve(format!(
            "top eigenvector has a negative entry {bad:e}"
        )));
    }
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    let norm = v.norm();
    Ok(v / norm)
}

/// Decay rates and eigenvectors of the mean and second-moment generators.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralResult {
    pub lambda: f64,
    pub v: DVector<f64>,
    pub mu: f64,
    /// Triangle-indexed.
    pub w: DVector<f64>,
    /// `mu - 2 lambda`.
    pub gap: f64,
    pub separation_mean: f64,
    pub separation_second: f64,
}

impl SpectralResult {
    pub fn n_modes(&self) -> usize {
        self.v.len()
    }

    /// `c_V = sum_l V_l |a_l|^2`.
    pub fn mean_projection(&self, amplitudes: &[f64]) -> f64 {
        self.v.dot(&initial_mean(amplitudes))
    }

    /// `c_W = sum_{j<=l} W_jl S_jl(0)`, equal to the ordered sum of `W_jl |a_j|^2 |a_l|^2`.
    pub fn second_projection(&self, amplitudes: &[f64]) -> f64 {
        self.w.dot(&initial_second(amplitudes))
    }

    pub fn report(&self) -> SpectralReport {
        SpectralReport {
            lambda: self.lambda,
            mu: self.mu,
            gap: self.gap,
            v: self.v.iter().copied().collect(),
            w: self.w.iter().copied().collect(),
            eigen_separations: Separations {
                mean: self.separation_mean,
                second: self.separation_second,
            },
            expansion_tables: Vec::new(),
        }
    }
}

pub fn growth_rates(coupling: &CouplingSet) -> Result<SpectralResult> {
    let n = coupling.len();
    let mean = if n <= DENSE_LIMIT {
        perron_pair(&coupling.mean_operator())?
    } else {
        perron_pair_sparse(&SparseMatrix::from_dense(&coupling.mean_operator()))?
    };
    let size = TriangleIndex::new(n).len();
    let second = if size <= DENSE_LIMIT {
        perron_pair(&assemble_triangle(coupling).generator())?
    } else {
        perron_pair_sparse(&triangle_generator_sparse(coupling))?
    };
    let (lambda, mu) = (-mean.value, -second.value);
    let gap = mu - 2.0 * lambda;
    if gap > GAP_TOL * (1.0 + mu.abs()) {
        return Err(Error::GrowthInequality { gap });
    }
    Ok(SpectralResult {
        lambda,
        v: mean.vector,
        mu,
        w: second.vector,
        gap,
        separation_mean: mean.separation,
        separation_second: second.separation,
    })
}

/// `c_V V e^{-lambda z}`.
pub fn asymptotic_mean(spectral: &SpectralResult, amplitudes: &[f64], z: f64) -> DVector<f64> {
    &spectral.v * (spectral.mean_projection(amplitudes) * (-spectral.lambda * z).exp())
}

/// `c_W W e^{-mu z}` in triangle order.
pub fn asymptotic_second(spectral: &SpectralResult, amplitudes: &[f64], z: f64) -> DVector<f64> {
    &spectral.w * (spectral.second_projection(amplitudes) * (-spectral.mu * z).exp())
}

/// Leading-order `(E|p|^2, E|p|^4)` from intensity weights `phi_j(x)^2 / beta_j`.
pub fn intensity_moments_weighted(
    weights: &[f64],
    spectral: &SpectralResult,
    amplitudes: &[f64],
    z: f64,
) -> (f64, f64) {
    let index = TriangleIndex::new(weights.len());
    let mean_profile: f64 = weights
        .iter()
        .zip(spectral.v.iter())
        .map(|(w, v)| w * v)
        .sum();
    let second_profile: f64 = index
        .pairs()
        .zip(spectral.w.iter())
        .map(|((j, l), w)| {
            let mult = if j == l { 1.0 } else { 2.0 };
            mult * weights[j] * weights[l] * w
        })
        .sum();
    let m2 = mean_profile * spectral.mean_projection(amplitudes) * (-spectral.lambda * z).exp();
    let m4 = second_profile * spectral.second_projection(amplitudes) * (-spectral.mu * z).exp();
    (m2, m4)
}

pub fn intensity_moments(
    basis: &ModeBasis,
    spectral: &SpectralResult,
    amplitudes: &[f64],
    x: f64,
    z: f64,
) -> (f64, f64) {
    intensity_moments_weighted(&intensity_weights(basis, x), spectral, amplitudes, z)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scintillation {
    /// `m4 / m2^2`.
    pub ratio: f64,
    /// `-(mu - 2 lambda)`.
    pub exponent: f64,
}

pub fn scintillation_ratio(
    basis: &ModeBasis,
    spectral: &SpectralResult,
    amplitudes: &[f64],
    x: f64,
    z: f64,
) -> Scintillation {
    let (m2, m4) = intensity_moments(basis, spectral, amplitudes, x, z);
    Scintillation {
        ratio: m4 / (m2 * m2),
        exponent: -spectral.gap,
    }
}

/// Second-order series `c0 + c1 theta + c2 theta^2` for both decay rates and
/// first-order eigenvector corrections.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionCoefficients {
    pub lambda: [f64; 3],
    pub mu: [f64; 3],
    pub v0: Vec<f64>,
    pub v1: Vec<f64>,
    pub w0: Vec<f64>,
    pub w1: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub theta: f64,
    pub lambda: f64,
    pub mu: f64,
    pub gap: f64,
    pub v: Vec<f64>,
}

fn series(c: &[f64; 3], theta: f64) -> f64 {
    c[0] + theta * (c[1] + theta * c[2])
}

impl ExpansionCoefficients {
    pub fn predict_lambda(&self, theta: f64) -> f64 {
        series(&self.lambda, theta)
    }

    pub fn predict_mu(&self, theta: f64) -> f64 {
        series(&self.mu, theta)
    }

    pub fn predict_gap(&self, theta: f64) -> f64 {
        self.predict_mu(theta) - 2.0 * self.predict_lambda(theta)
    }

    /// `V0 + theta V1`, renormalized.
    pub fn predict_v(&self, theta: f64) -> DVector<f64> {
        let v = DVector::from_fn(self.v0.len(), |i, _| self.v0[i] + theta * self.v1[i]);
        let norm = v.norm();
        v / norm
    }

    pub fn predict(&self, theta: f64) -> Prediction {
        Prediction {
            theta,
            lambda: self.predict_lambda(theta),
            mu: self.predict_mu(theta),
            gap: self.predict_gap(theta),
            v: self.predict_v(theta).iter().copied().collect(),
        }
    }
}

/// Closed forms available when all rates `Gamma_jl` (j != l) share one value.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConstantRateForms {
    pub rate: f64,
    pub lambda2: f64,
    pub mu2: f64,
    /// Coefficient of `theta^2` in `mu - 2 lambda`.
    pub gap2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakDissipationExpansion {
    pub coefficients: ExpansionCoefficients,
    pub constant_rate: Option<ConstantRateForms>,
}

/// Solves `(G - u u^T) x = rhs` for a symmetric `G` whose kernel is spanned by the unit vector `u`.
fn solve_on_complement(
    g: &DMatrix<f64>,
    kernel: &DVector<f64>,
    rhs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let shifted = g - kernel * kernel.transpose();
    shifted
        .lu()
        .solve(rhs)
        .ok_or_else(|| Error::Solve("singular system on the complement of the kernel".into()))
}

fn constant_rate(gamma: &DMatrix<f64>) -> Option<f64> {
    let n = gamma.nrows();
    if n < 2 {
        return None;
    }
    let first = gamma[(0, 1)];
    let scale = gamma.amax().max(f64::MIN_POSITIVE);
    let uniform =
        (0..n).all(|j| (0..n).all(|l| j == l || (gamma[(j, l)] - first).abs() <= 1e-12 * scale));
    (uniform && first > 0.0).then_some(first)
}

/// Expansion of the decay rates for `A = Gamma - theta diag(Lambda1)`.
pub fn weak_dissipation_expansion(
    gamma: &DMatrix<f64>,
    lambda1: &DVector<f64>,
) -> Result<WeakDissipationExpansion> {
    let n = lambda1.len();
    if gamma.nrows() != n || gamma.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: gamma.nrows(),
        });
    }
    if !SparseMatrix::from_dense(gamma).is_irreducible() {
        return Err(Error::Reducible);
    }
    let nf = n as f64;
    let lambda_1 = lambda1.mean();
    let v0 = DVector::from_element(n, 1.0 / nf.sqrt());
    let rhs_v = DVector::from_fn(n, |j, _| (lambda1[j] - lambda_1) * v0[j]);
    let v1 = solve_on_complement(gamma, &v0, &rhs_v)?;
    let lambda_2: f64 = (0..n).map(|j| v0[j] * lambda1[j] * v1[j]).sum();

    let coupling = CouplingSet::from_rates(gamma.clone(), DVector::zeros(n))?;
    let triangle = assemble_triangle(&coupling);
    let index = &triangle.index;
    let size = index.len();
    let psi1 = DVector::from_iterator(size, index.pairs().map(|(j, l)| lambda1[j] + lambda1[l]));
    let w0 = DVector::from_element(size, (2.0 / (nf * (nf + 1.0))).sqrt());
    let mu_1 = w0.dot(&psi1.component_mul(&w0));
    let rhs_w = DVector::from_fn(size, |i, _| (psi1[i] - mu_1) * w0[i]);
    let w1 = solve_on_complement(&triangle.theta, &w0, &rhs_w)?;
    let mu_2 = w0.dot(&psi1.component_mul(&w1));

    let constant = constant_rate(gamma).map(|rate| {
        let spread: f64 = lambda1.iter().map(|x| (x - lambda_1).powi(2)).sum();
        ConstantRateForms {
            rate,
            lambda2: -spread / (rate * nf * nf),
            mu2: -2.0 * (nf + 2.0) * spread / (nf * nf * (nf + 1.0) * rate),
            gap2: -2.0 * spread / (nf * nf * (nf + 1.0) * rate),
        }
    });
    Ok(WeakDissipationExpansion {
        coefficients: ExpansionCoefficients {
            lambda: [0.0, lambda_1, lambda_2],
            mu: [0.0, mu_1, mu_2],
            v0: v0.iter().copied().collect(),
            v1: v1.iter().copied().collect(),
            w0: w0.iter().copied().collect(),
            w1: w1.iter().copied().collect(),
        },
        constant_rate: constant,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakCouplingExpansion {
    pub coefficients: ExpansionCoefficients,
    /// Mode with the smallest dissipation.
    pub minimizer: usize,
}

/// Expansion of the decay rates for `A = theta Gamma1 - diag(Lambda)`.
pub fn weak_coupling_expansion(
    lambda: &DVector<f64>,
    gamma1: &DMatrix<f64>,
) -> Result<WeakCouplingExpansion> {
    let n = lambda.len();
    if gamma1.nrows() != n || gamma1.ncols() != n {
        return Err(Error::Dimension {
            expected: n,
            got: gamma1.nrows(),
        });
    }
    if n == 0 {
        return Err(Error::Dimension {
            expected: 1,
            got: 0,
        });
    }
    let star = lambda.imin();
    let floor = lambda[star];
    let tol = 1e-12 * lambda.amax().max(1.0);
    if let Some(other) = (0..n).find(|&j| j != star && lambda[j] - floor <= tol) {
        return Err(Error::NonUniqueMinimum {
            value: floor,
            first: star.min(other),
            second: star.max(other),
        });
    }
    let others = || (0..n).filter(move |&j| j != star);
    let rate_sum: f64 = others().map(|j| gamma1[(j, star)]).sum();
    let second_sum: f64 = others()
        .map(|j| gamma1[(j, star)].powi(2) / (lambda[j] - floor))
        .sum();

    let v0 = DVector::from_fn(n, |j, _| if j == star { 1.0 } else { 0.0 });
    let v1 = DVector::from_fn(n, |j, _| {
        if j == star {
            0.0
        } else {
            gamma1[(j, star)] / (lambda[j] - floor)
        }
    });
    let index = TriangleIndex::new(n);
    let diag = index.index(star, star);
    let mut w0 = DVector::zeros(index.len());
    w0[diag] = 1.0;
    let mut w1 = DVector::zeros(index.len());
    for j in others() {
        w1[index.index(star, j)] = 2.0 * gamma1[(j, star)] / (lambda[j] - floor);
    }
    Ok(WeakCouplingExpansion {
        coefficients: ExpansionCoefficients {
            lambda: [floor, rate_sum, -second_sum],
            mu: [2.0 * floor, 2.0 * rate_sum, -4.0 * second_sum],
            v0: v0.iter().copied().collect(),
            v1: v1.iter().copied().collect(),
            w0: w0.iter().copied().collect(),
            w1: w1.iter().copied().collect(),
        },
        minimizer: star,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    WeakDissipation,
    WeakCoupling,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionRow {
    pub theta: f64,
    pub lambda_exact: f64,
    pub lambda_pred: f64,
    pub mu_exact: f64,
    pub mu_pred: f64,
    pub gap_exact: f64,
    pub gap_pred: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionTable {
    pub regime: Regime,
    pub coefficients: ExpansionCoefficients,
    pub rows: Vec<ExpansionRow>,
}

/// Series predictions against full eigensolves at each `theta`.
pub fn expansion_table(
    regime: Regime,
    lambda: &DVector<f64>,
    gamma: &DMatrix<f64>,
    thetas: &[f64],
) -> Result<ExpansionTable> {
    let coefficients = match regime {
        Regime::WeakDissipation => weak_dissipation_expansion(gamma, lambda)?.coefficients,
        Regime::WeakCoupling => weak_coupling_expansion(lambda, gamma)?.coefficients,
    };
    let rows = thetas
        .iter()
        .map(|&theta| {
            let coupling = match regime {
                Regime::WeakDissipation => CouplingSet::from_rates(gamma.clone(), lambda * theta)?,
                Regime::WeakCoupling => CouplingSet::from_rates(gamma * theta, lambda.clone())?,
            };
            let exact = growth_rates(&coupling)?;
            Ok(ExpansionRow {
                theta,
                lambda_exact: exact.lambda,
                lambda_pred: coefficients.predict_lambda(theta),
                mu_exact: exact.mu,
                mu_pred: coefficients.predict_mu(theta),
                gap_exact: exact.gap,
                gap_pred: coefficients.predict_gap(theta),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ExpansionTable {
        regime,
        coefficients,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Separations {
    pub mean: f64,
    pub second: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectralReport {
    pub lambda: f64,
    pub mu: f64,
    pub gap: f64,
    #[serde(rename = "V")]
    pub v: Vec<f64>,
    #[serde(rename = "W")]
    pub w: Vec<f64>,
    pub eigen_separations: Separations,
    pub expansion_tables: Vec<ExpansionTable>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant_gamma(n: usize, rate: f64) -> DMatrix<f64> {
        CouplingSet::generator_from_rates(&DMatrix::from_fn(
            n,
            n,
            |j, l| if j == l { 0.0 } else { rate },
        ))
    }

    fn random_instance(rng: &mut ChaCha8Rng, n: usize) -> CouplingSet {
        let mut rates = DMatrix::zeros(n, n);
        for j in 0..n {
            for l in j + 1..n {
                let r = rng.random_range(0.05..2.0);
                rates[(j, l)] = r;
                rates[(l, j)] = r;
            }
        }
        let lambda = DVector::from_fn(n, |_, _| rng.random_range(0.0..1.5));
        CouplingSet::from_rates(CouplingSet::generator_from_rates(&rates), lambda).unwrap()
    }

    /// Cyclic Jacobi rotations; independent of the library eigensolvers.
    fn jacobi_eigenvalues(m: &DMatrix<f64>) -> Vec<f64> {
        let mut a = m.clone();
        let n = a.nrows();
        for _ in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| a[(i, j)].powi(2))
                .sum();
            if off < 1e-30 {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    if a[(p, q)].abs() < 1e-300 {
                        continue;
                    }
                    let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * a[(p, q)]);
                    let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                    let t = if tau == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let (akp, akq) = (a[(k, p)], a[(k, q)]);
                        a[(k, p)] = c * akp - s * akq;
                        a[(k, q)] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let (apk, aqk) = (a[(p, k)], a[(q, k)]);
                        a[(p, k)] = c * apk - s * aqk;
                        a[(q, k)] = s * apk + c * aqk;
                    }
                }
            }
        }
        let mut ev: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }

    #[test]
    fn two_by_two_generator() {
        let m = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let p = perron_pair(&m).unwrap();
        assert!(p.value.abs() < 1e-15);
        let s = 1.0 / 2f64.sqrt();
        assert!((p.vector[0] - s).abs() < 1e-15 && (p.vector[1] - s).abs() < 1e-15);
        assert!((p.separation - 2.0).abs() < 1e-14);
    }

    #[test]
    fn random_five_by_five_matches_jacobi() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let c = random_instance(&mut rng, 5);
            let a = c.mean_operator();
            let p = perron_pair(&a).unwrap();
            let ev = jacobi_eigenvalues(&a);
            assert!((p.value - ev[0]).abs() < 1e-12, "{} vs {}", p.value, ev[0]);
            assert!((p.separation - (ev[0] - ev[1])).abs() < 1e-12);
            assert!(p.vector.iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn reducible_and_degenerate_are_errors() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![-1.0, -2.0]));
        assert_eq!(perron_pair(&m).unwrap_err(), Error::Reducible);
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1e-14, 1e-14, 0.0]);
        assert!(matches!(
            perron_pair(&m).unwrap_err(),
            Error::DegenerateTop { .. }
        ));
    }

    #[test]
    fn no_dissipation_profiles() {
        for n in 1..=6 {
            let c = CouplingSet::from_rates(constant_gamma(n, 0.7), DVector::zeros(n)).unwrap();
            let r = growth_rates(&c).unwrap();
            let nf = n as f64;
            assert!(r.lambda.abs() < 1e-14 && r.mu.abs() < 1e-14 && r.gap.abs() < 1e-14);
            assert!(r.v.iter().all(|&x| (x - 1.0 / nf.sqrt()).abs() < 1e-13));
            let c_n = (2.0 / (nf * (nf + 1.0))).sqrt();
            assert!(r.w.iter().all(|&x| (x - c_n).abs() < 1e-13));
        }
    }

    #[test]
    fn constant_dissipation_shifts_rates() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = random_instance(&mut rng, 4);
        let mut flat = base.clone();
        flat.lambda.fill(0.8);
        let r = growth_rates(&flat).unwrap();
        assert!(
            (r.lambda - 0.8).abs() < 1e-13 && (r.mu - 1.6).abs() < 1e-13 && r.gap.abs() < 1e-13
        );

        let r0 = growth_rates(&base).unwrap();
        let mut shifted = base.clone();
        shifted.lambda.add_scalar_mut(0.3);
        let r1 = growth_rates(&shifted).unwrap();
        assert!((r1.lambda - r0.lambda - 0.3).abs() < 1e-12);
        assert!((r1.mu - r0.mu - 0.6).abs() < 1e-12);
        assert!((&r1.v - &r0.v).amax() < 1e-10 && (&r1.w - &r0.w).amax() < 1e-10);
    }

    #[test]
    fn gap_is_nonpositive_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(2..7);
            let r = growth_rates(&random_instance(&mut rng, n)).unwrap();
            assert!(r.gap <= 1e-10, "gap {}", r.gap);
        }
    }

    #[test]
    fn sparse_path_agrees_with_dense() {
        // nearest-neighbour chain with a large triangle
        let n = 40;
        let mut rates = DMatrix::zeros(n, n);
        for j in 0..n - 1 {
            let g = 1.0 + 0.5 * (j as f64 / n as f64);
            rates[(j, j + 1)] = g;
            rates[(j + 1, j)] = g;
        }
        let mut lambda = DVector::zeros(n);
        lambda[n - 1] = 2.0;
        let c = CouplingSet::from_rates(CouplingSet::generator_from_rates(&rates), lambda).unwrap();
        let sparse = perron_pair_sparse(&triangle_generator_sparse(&c)).unwrap();
        let dense_top = dense_top(&assemble_triangle(&c).generator());
        assert!(TriangleIndex::new(n).len() > DENSE_LIMIT);
        assert!(
            (sparse.value - dense_top.value).abs() < 1e-12,
            "{} vs {}",
            sparse.value,
            dense_top.value
        );
        assert!((sparse.vector.dot(&dense_top.vector).abs() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn asymptotic_mean_matches_propagation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let c = random_instance(&mut rng, 4);
        let r = growth_rates(&c).unwrap();
        let amps = [0.9, 0.1, 0.4, 0.0];
        let q0 = initial_mean(&amps);
        let mut prev = f64::INFINITY;
        for &z in &[2.0, 4.0, 8.0] {
            let q = crate::moments::propagate_mean(&c, &q0, z).unwrap();
            let qa = asymptotic_mean(&r, &amps, z);
            let rel = (&q - &qa).norm() / qa.norm();
            assert!(rel < prev);
            prev = rel;
        }
        assert!(prev < 1e-3);
        assert!((r.mean_projection(&[2.0, 0.0, 0.0, 0.0]) - 4.0 * r.v[0]).abs() < 1e-15);
    }

    #[test]
    fn no_dissipation_ratio() {
        for n in 1..=5 {
            let c = CouplingSet::from_rates(constant_gamma(n, 1.3), DVector::zeros(n)).unwrap();
            let r = growth_rates(&c).unwrap();
            let weights: Vec<f64> = (0..n).map(|j| 0.2 + j as f64).collect();
            let amps: Vec<f64> = (0..n).map(|j| 1.0 / (1.0 + j as f64)).collect();
            let (m2, m4) = intensity_moments_weighted(&weights, &r, &amps, 5.0);
            let nf = n as f64;
            assert!((m4 / (m2 * m2) - 2.0 * nf / (nf + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn weak_dissipation_constant_rate_closed_forms() {
        let (n, rate) = (5, 0.8);
        let lambda1 = DVector::from_vec(vec![0.0, 0.3, 1.0, 0.2, 0.5]);
        let e = weak_dissipation_expansion(&constant_gamma(n, rate), &lambda1).unwrap();
        let forms = e.constant_rate.unwrap();
        let c = &e.coefficients;
        assert!((c.lambda[2] - forms.lambda2).abs() < 1e-13);
        assert!((c.mu[2] - forms.mu2).abs() < 1e-13);
        assert!((c.mu[2] - 2.0 * c.lambda[2] - forms.gap2).abs() < 1e-13);
        assert!((c.mu[1] - 2.0 * c.lambda[1]).abs() < 1e-14);
        // closed-form V1 = -(Lambda1 - lambda1) / (Gamma N^{3/2})
        let nf = n as f64;
        for j in 0..n {
            let expected = -(lambda1[j] - c.lambda[1]) / (rate * nf.powf(1.5));
            assert!((c.v1[j] - expected).abs() < 1e-13);
        }
        let zero =
            weak_dissipation_expansion(&constant_gamma(n, rate), &DVector::zeros(n)).unwrap();
        assert!(zero
            .coefficients
            .lambda
            .iter()
            .chain(&zero.coefficients.mu)
            .all(|x| *x == 0.0));
    }

    #[test]
    fn second_order_forms_coincide() {
        // W0^T Psi1 W1 equals W1^T Theta W1, and likewise for lambda
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let c = random_instance(&mut rng, 4);
        let lambda1 = DVector::from_vec(vec![0.1, 0.7, 0.0, 0.4]);
        let e = weak_dissipation_expansion(&c.gamma, &lambda1)
            .unwrap()
            .coefficients;
        let theta = assemble_triangle(
            &CouplingSet::from_rates(c.gamma.clone(), DVector::zeros(4)).unwrap(),
        )
        .theta;
        let w1 = DVector::from_vec(e.w1.clone());
        let v1 = DVector::from_vec(e.v1.clone());
        assert!((w1.dot(&(&theta * &w1)) - e.mu[2]).abs() < 1e-12);
        assert!((v1.dot(&(&c.gamma * &v1)) - e.lambda[2]).abs() < 1e-12);
    }

    #[test]
    fn weak_dissipation_two_mode_gap() {
        let rate = 1.5;
        let theta = 1e-3;
        let c =
            CouplingSet::from_rates(constant_gamma(2, rate), DVector::from_vec(vec![0.0, theta]))
                .unwrap();
        let r = growth_rates(&c).unwrap();
        let predicted = -theta * theta / (12.0 * rate);
        assert!((r.gap / predicted - 1.0).abs() < 1e-2);
    }

    fn slope(errors: &[f64]) -> f64 {
        let n = errors.len();
        (errors[n - 2] / errors[n - 1]).log2()
    }

    #[test]
    fn weak_dissipation_third_order_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = random_instance(&mut rng, 4);
        let lambda1 = DVector::from_vec(vec![0.0, 1.0, 0.4, 0.2]);
        let table = expansion_table(
            Regime::WeakDissipation,
            &lambda1,
            &c.gamma,
            &[0.04, 0.02, 0.01],
        )
        .unwrap();
        let err_l: Vec<f64> = table
            .rows
            .iter()
            .map(|r| (r.lambda_exact - r.lambda_pred).abs())
            .collect();
        let err_m: Vec<f64> = table
            .rows
            .iter()
            .map(|r| (r.mu_exact - r.mu_pred).abs())
            .collect();
        assert!((slope(&err_l) - 3.0).abs() < 0.2, "{err_l:?}");
        assert!((slope(&err_m) - 3.0).abs() < 0.2, "{err_m:?}");
    }

    #[test]
    fn weak_coupling_two_mode_example() {
        let lambda = DVector::from_vec(vec![1.0, 2.0]);
        let gamma1 = CouplingSet::generator_from_rates(&DMatrix::from_row_slice(
            2,
            2,
            &[0.0, 1.0, 1.0, 0.0],
        ));
        let e = weak_coupling_expansion(&lambda, &gamma1).unwrap();
        assert_eq!(e.minimizer, 0);
        assert_eq!(e.coefficients.lambda, [1.0, 1.0, -1.0]);
        assert_eq!(e.coefficients.mu, [2.0, 2.0, -4.0]);
        let table = expansion_table(Regime::WeakCoupling, &lambda, &gamma1, &[1e-2]).unwrap();
        let row = &table.rows[0];
        assert!((row.lambda_exact - row.lambda_pred).abs() < 1e-4);
        assert!((row.mu_exact - row.mu_pred).abs() < 1e-4);
        assert!(row.gap_exact < 0.0);
    }

    #[test]
    fn weak_coupling_third_order_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = random_instance(&mut rng, 4);
        let lambda = DVector::from_vec(vec![0.5, 1.1, 0.1, 2.0]);
        let table = expansion_table(
            Regime::WeakCoupling,
            &lambda,
            &c.gamma,
            &[0.02, 0.01, 0.005],
        )
        .unwrap();
        let err_l: Vec<f64> = table
            .rows
            .iter()
            .map(|r| (r.lambda_exact - r.lambda_pred).abs())
            .collect();
        let err_m: Vec<f64> = table
            .rows
            .iter()
            .map(|r| (r.mu_exact - r.mu_pred).abs())
            .collect();
        assert!((slope(&err_l) - 3.0).abs() < 0.2, "{err_l:?}");
        assert!((slope(&err_m) - 3.0).abs() < 0.2, "{err_m:?}");
        let zero = weak_coupling_expansion(&lambda, &DMatrix::zeros(4, 4)).unwrap();
        assert_eq!(zero.coefficients.lambda, [0.1, 0.0, -0.0]);
        assert_eq!(zero.coefficients.v0, vec![0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn weak_coupling_rejects_tied_minimum() {
        let lambda = DVector::from_vec(vec![0.3, 1.0, 0.3]);
        let err = weak_coupling_expansion(&lambda, &DMatrix::zeros(3, 3)).unwrap_err();
        assert!(matches!(
            err,
            Error::NonUniqueMinimum {
                first: 0,
                second: 2,
                ..
            }
        ));
    }

    #[test]
    fn report_serializes_named_fields() {
        let c = CouplingSet::from_rates(constant_gamma(2, 1.0), DVector::from_vec(vec![0.0, 0.5]))
            .unwrap();
        let json = serde_json::to_value(growth_rates(&c).unwrap().report()).unwrap();
        for key in [
            "lambda",
            "mu",
            "gap",
            "V",
            "W",
            "eigen_separations",
            "expansion_tables",
        ] {
            assert!(json.get(key).is_some(), "{key}");
        }
    }
}
