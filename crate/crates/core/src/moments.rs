//! Closed first- and second-moment equations for the guided mode powers.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::coupling::CouplingSet;
use crate::error::{Error, Result};
use crate::linalg::SparseMatrix;
use crate::mode_solver::ModeBasis;
use crate::par::map_indices;

/// Entries above this negative threshold are rounding noise and are clamped to zero.
pub const CLAMP_THRESHOLD: f64 = -1e-12;

/// Lexicographic flat index over the triangle `0 <= j <= l < n`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TriangleIndex {
    pub n: usize,
}

impl TriangleIndex {
    pub fn new(n: usize) -> Self {
        Self { n }
    }

    pub fn len(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Flat index of `(j, l)`; pairs with `j > l` are reflected to `(l, j)`.
    pub fn index(&self, j: usize, l: usize) -> usize {
        let (a, b) = if j <= l { (j, l) } else { (l, j) };
        a * (2 * self.n - a + 1) / 2 + (b - a)
    }

    pub fn pair(&self, idx: usize) -> (usize, usize) {
        let mut start = 0;
        for j in 0..self.n {
            let row = self.n - j;
            if idx < start + row {
                return (j, j + idx - start);
            }
            start += row;
        }
        panic!("triangle index {idx} out of range for n = {}", self.n);
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.n).flat_map(move |j| (j..self.n).map(move |l| (j, l)))
    }

    /// Column labels `S_jl` in flat order.
    pub fn labels(&self, prefix: &str) -> Vec<String> {
        self.pairs()
            .map(|(j, l)| format!("{prefix}_{j}_{l}"))
            .collect()
    }
}

/// `Theta` and `Psi` of the second-moment system `dS/dz = (Theta - Psi) S`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleOperator {
    pub index: TriangleIndex,
    pub theta: DMatrix<f64>,
    /// Diagonal of `Psi`: `Lambda_j + Lambda_l`.
    pub psi: DVector<f64>,
}

impl TriangleOperator {
    /// `Theta - Psi`.
    pub fn generator(&self) -> DMatrix<f64> {
        &self.theta - DMatrix::from_diagonal(&self.psi)
    }
}

/// Off-diagonal entries of `Theta` in row `(j, l)` as `(column, coefficient)`,
/// followed by the diagonal coefficient.
pub(crate) fn theta_row(
    gamma: &DMatrix<f64>,
    index: &TriangleIndex,
    j: usize,
    l: usize,
) -> (Vec<(usize, f64)>, f64) {
    let n = index.n;
    let mut entries = Vec::with_capacity(2 * n);
    let mut diag = 0.0;
    if j != l {
        let g = gamma[(j, l)];
        entries.push((index.index(j, j), 2.0 * g));
        entries.push((index.index(l, l), 2.0 * g));
        diag -= 4.0 * g;
    }
    for m in 0..n {
        if m == j || m == l {
            continue;
        }
        let (g_lm, g_jm) = (gamma[(l, m)], gamma[(j, m)]);
        entries.push((index.index(j, m), g_lm));
        entries.push((index.index(m, l), g_jm));
        diag -= g_lm + g_jm;
    }
    (entries, diag)
}

pub fn assemble_triangle(coupling: &CouplingSet) -> TriangleOperator {
    let n = coupling.len();
    let index = TriangleIndex::new(n);
    let size = index.len();
    let mut theta = DMatrix::zeros(size, size);
    let mut psi = DVector::zeros(size);
    for (row, (j, l)) in index.pairs().enumerate() {
        let (entries, diag) = theta_row(&coupling.gamma, &index, j, l);
        for (col, value) in entries {
            theta[(row, col)] += value;
        }
        theta[(row, row)] += diag;
        psi[row] = coupling.lambda[j] + coupling.lambda[l];
    }
    TriangleOperator { index, theta, psi }
}

/// `Theta - Psi` in sparse storage; zero rates contribute no entries.
pub fn triangle_generator_sparse(coupling: &CouplingSet) -> SparseMatrix {
    let index = TriangleIndex::new(coupling.len());
    let mut triplets = Vec::new();
    for (row, (j, l)) in index.pairs().enumerate() {
        let (entries, diag) = theta_row(&coupling.gamma, &index, j, l);
        triplets.extend(
            entries
                .into_iter()
                .filter(|&(_, v)| v != 0.0)
                .map(|(col, v)| (row, col, v)),
        );
        triplets.push((row, row, diag - coupling.lambda[j] - coupling.lambda[l]));
    }
    SparseMatrix::from_triplets(index.len(), triplets)
}

/// `exp(M z)` applied to vectors for a symmetric `M`, via one eigendecomposition.
#[derive(Debug, Clone)]
pub struct SymmetricPropagator {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl SymmetricPropagator {
    pub fn new(matrix: &DMatrix<f64>) -> Result<Self> {
        if matrix.nrows() != matrix.ncols() {
            return Err(Error::Dimension {
                expected: matrix.nrows(),
                got: matrix.ncols(),
            });
        }
        let sym = (matrix + matrix.transpose()) * 0.5;
        let eig = SymmetricEigen::new(sym);
        Ok(Self {
            eigenvalues: eig.eigenvalues,
            eigenvectors: eig.eigenvectors,
        })
    }

    /// `exp(M z) v0` without clamping.
    pub fn apply_raw(&self, v0: &DVector<f64>, z: f64) -> DVector<f64> {
        let coeffs = self.eigenvectors.tr_mul(v0);
        let scaled = DVector::from_fn(coeffs.len(), |i, _| {
            coeffs[i] * (self.eigenvalues[i] * z).exp()
        });
        &self.eigenvectors * scaled
    }

    /// `exp(M z) v0` with entries in `[CLAMP_THRESHOLD, 0)` set to zero; returns
    /// the clamped vector and the number of entries below the threshold.
    pub fn apply(&self, v0: &DVector<f64>, z: f64) -> (DVector<f64>, usize) {
        let mut v = self.apply_raw(v0, z);
        let scale = v0.amax().max(f64::MIN_POSITIVE);
        let mut below = 0;
        for x in v.iter_mut() {
            if *x < 0.0 {
                if *x < CLAMP_THRESHOLD * scale {
                    below += 1;
                }
                *x = 0.0;
            }
        }
        (v, below)
    }

    pub fn apply_logged(&self, v0: &DVector<f64>, z: f64, what: &str) -> DVector<f64> {
        let (v, below) = self.apply(v0, z);
        if below > 0 {
            log::warn!("{what}: {below} entries below {CLAMP_THRESHOLD:e} clamped at z = {z}");
        }
        v
    }

    pub fn apply_many(&self, v0: &DVector<f64>, zs: &[f64], what: &str) -> Vec<DVector<f64>> {
        map_indices(zs.len(), |i| self.apply_logged(v0, zs[i], what))
    }
}

/// `|a_j|^2`.
pub fn initial_mean(amplitudes: &[f64]) -> DVector<f64> {
    DVector::from_iterator(amplitudes.len(), amplitudes.iter().map(|a| a * a))
}

/// `S_jl(0) = (2 - delta_jl) |a_j|^2 |a_l|^2`.
pub fn initial_second(amplitudes: &[f64]) -> DVector<f64> {
    let index = TriangleIndex::new(amplitudes.len());
    DVector::from_iterator(
        index.len(),
        index.pairs().map(|(j, l)| {
            let p = amplitudes[j].powi(2) * amplitudes[l].powi(2);
            if j == l {
                p
            } else {
                2.0 * p
            }
        }),
    )
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// `Q(z) = exp((Gamma - diag(Lambda)) z) Q0`.
pub fn propagate_mean(coupling: &CouplingSet, q0: &DVector<f64>, z: f64) -> Result<DVector<f64>> {
    check_len(coupling.len(), q0.len())?;
    let prop = SymmetricPropagator::new(&coupling.mean_operator())?;
    Ok(prop.apply_logged(q0, z, "mean powers"))
}

/// `S(z) = exp((Theta - Psi) z) S0`.
pub fn propagate_second(
    triangle: &TriangleOperator,
    s0: &DVector<f64>,
    z: f64,
) -> Result<DVector<f64>> {
    check_len(triangle.index.len(), s0.len())?;
    let prop = SymmetricPropagator::new(&triangle.generator())?;
    Ok(prop.apply_logged(s0, z, "second moments"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentState {
    pub z: f64,
    /// Mean mode powers `E[P_j]`.
    pub q: Vec<f64>,
    /// `S_jl` in triangle order: `E[P_j^2]` on the diagonal, `2 E[P_j P_l]` off it.
    pub s: Vec<f64>,
}

/// Mean and second moments at every checkpoint from the source amplitudes.
pub fn moment_trajectory(
    coupling: &CouplingSet,
    amplitudes: &[f64],
    zs: &[f64],
) -> Result<Vec<MomentState>> {
    check_len(coupling.len(), amplitudes.len())?;
    let mean = SymmetricPropagator::new(&coupling.mean_operator())?;
    let second = SymmetricPropagator::new(&assemble_triangle(coupling).generator())?;
    let q0 = initial_mean(amplitudes);
    let s0 = initial_second(amplitudes);
    let qs = mean.apply_many(&q0, zs, "mean powers");
    let ss = second.apply_many(&s0, zs, "second moments");
    Ok(zs
        .iter()
        .zip(qs.into_iter().zip(ss))
        .map(|(&z, (q, s))| MomentState {
            z,
            q: q.iter().copied().collect(),
            s: s.iter().copied().collect(),
        })
        .collect())
}

/// Weights `phi_j(x)^2 / beta_j`.
pub fn intensity_weights(basis: &ModeBasis, x: f64) -> Vec<f64> {
    basis
        .modes
        .iter()
        .map(|m| m.eval(&basis.spec, x).powi(2) / m.beta)
        .collect()
}

/// `(E|p(x)|^2, E|p(x)|^4)` from mean powers and triangle second moments.
pub fn intensity_from_moments(weights: &[f64], q: &[f64], s: &[f64]) -> (f64, f64) {
    let index = TriangleIndex::new(weights.len());
    let m2 = weights.iter().zip(q).map(|(w, q)| w * q).sum();
    let m4 = index
        .pairs()
        .zip(s)
        .map(|((j, l), s)| {
            // sum over ordered pairs with S reflected
            let mult = if j == l { 1.0 } else { 2.0 };
            mult * weights[j] * weights[l] * s
        })
        .sum();
    (m2, m4)
}
