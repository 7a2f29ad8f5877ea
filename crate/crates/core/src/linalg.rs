//! Sparse symmetric storage, banded Cholesky and shift-invert Lanczos for the
//! top of the spectrum of large symmetric matrices.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Compressed sparse rows with both triangles stored.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseMatrix {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl SparseMatrix {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut row_ptr = vec![0; n + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < n && c < n, "triplet ({r},{c}) outside {n}x{n}");
            if last == Some((r, c)) {
                *vals.last_mut().expect("previous entry exists") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for i in 0..n {
            row_ptr[i + 1] += row_ptr[i];
        }
        Self {
            n,
            row_ptr,
            cols,
            vals,
        }
    }

    pub fn from_dense(m: &DMatrix<f64>) -> Self {
        let mut triplets = Vec::new();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let v = m[(r, c)];
                if v != 0.0 {
                    triplets.push((r, c, v));
                }
            }
        }
        Self::from_triplets(m.nrows(), triplets)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()]
            .iter()
            .copied()
            .zip(self.vals[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.row(r)
            .find(|&(col, _)| col == c)
            .map_or(0.0, |(_, v)| v)
    }

    pub fn mul_vec(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.n) {
            *o = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.n);
        self.mul_vec(x.as_slice(), out.as_mut_slice());
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for r in 0..self.n {
            for (c, v) in self.row(r) {
                m[(r, c)] += v;
            }
        }
        m
    }

    pub fn bandwidth(&self) -> usize {
        (0..self.n)
            .flat_map(|r| self.row(r).map(move |(c, _)| r.abs_diff(c)))
            .max()
            .unwrap_or(0)
    }

    pub fn norm_inf(&self) -> f64 {
        (0..self.n)
            .map(|r| self.row(r).map(|(_, v)| v.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Upper Gershgorin bound on the spectrum.
    pub fn gershgorin_upper(&self) -> f64 {
        (0..self.n)
            .map(|r| {
                self.row(r)
                    .map(|(c, v)| if c == r { v } else { v.abs() })
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn max_asymmetry(&self) -> f64 {
        (0..self.n)
            .flat_map(|r| self.row(r).map(move |(c, v)| (r, c, v)))
            .map(|(r, c, v)| (v - self.get(c, r)).abs())
            .fold(0.0, f64::max)
    }

    /// Connectivity of the graph of nonzero off-diagonal entries.
    pub fn is_irreducible(&self) -> bool {
        if self.n <= 1 {
            return true;
        }
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut count = 1;
        while let Some(r) = queue.pop_front() {
            for (c, v) in self.row(r) {
                if c != r && v != 0.0 && !seen[c] {
                    seen[c] = true;
                    count += 1;
                    queue.push_back(c);
                }
            }
        }
        count == self.n
    }
}

/// Cholesky factor of a symmetric positive definite banded matrix.
#[derive(Debug, Clone)]
pub struct BandedCholesky {
    n: usize,
    bw: usize,
    /// Row `i` holds `L[i, i-bw ..= i]`.
    band: Vec<f64>,
}

impl BandedCholesky {
    /// Factors `shift * I - m`.
    pub fn shifted(m: &SparseMatrix, shift: f64) -> Result<Self> {
        let n = m.dim();
        let bw = m.bandwidth();
        let w = bw + 1;
        let mut band = vec![0.0; n * w];
        for r in 0..n {
            for (c, v) in m.row(r) {
                if c <= r {
                    band[r * w + (c + bw - r)] -= v;
                }
            }
            band[r * w + bw] += shift;
        }
        for i in 0..n {
            let lo_i = i.saturating_sub(bw);
            for j in lo_i..=i {
                let lo = lo_i.max(j.saturating_sub(bw));
                let mut s = band[i * w + (j + bw - i)];
                for k in lo..j {
                    s -= band[i * w + (k + bw - i)] * band[j * w + (k + bw - j)];
                }
                if i == j {
                    if s.is_nan() || s <= 0.0 {
                        return Err(Error::Solve(format!(
                            "matrix not positive definite at row {i}"
                        )));
                    }
                    band[i * w + bw] = s.sqrt();
                } else {
                    band[i * w + (j + bw - i)] = s / band[j * w + bw];
                }
            }
        }
        Ok(Self { n, bw, band })
    }

    #[allow(clippy::needless_range_loop)]
    pub fn solve_in_place(&self, x: &mut [f64]) {
        let (n, bw, w) = (self.n, self.bw, self.bw + 1);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = x[i];
            for k in lo..i {
                s -= self.band[i * w + (k + bw - i)] * x[k];
            }
            x[i] = s / self.band[i * w + bw];
        }
        for i in (0..n).rev() {
            x[i] /= self.band[i * w + bw];
            let xi = x[i];
            let lo = i.saturating_sub(bw);
            for k in lo..i {
                x[k] -= self.band[i * w + (k + bw - i)] * xi;
            }
        }
    }
}

/// The two largest eigenvalues and the leading eigenvector.
#[derive(Debug, Clone)]
pub struct TopEigen {
    pub value: f64,
    pub vector: DVector<f64>,
    pub second: Option<f64>,
}

/// Dense symmetric eigendecomposition, sorted by decreasing eigenvalue.
pub fn dense_top(m: &DMatrix<f64>) -> TopEigen {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    TopEigen {
        value: eig.eigenvalues[order[0]],
        vector: eig.eigenvectors.column(order[0]).into_owned(),
        second: order.get(1).map(|&i| eig.eigenvalues[i]),
    }
}

/// Shift-invert Lanczos with full reorthogonalization on `(c I - m)^{-1}`,
/// where `c` exceeds the spectrum of `m`.
pub fn lanczos_top(m: &SparseMatrix, max_steps: usize) -> Result<TopEigen> {
    let n = m.dim();
    let norm = m.norm_inf().max(f64::MIN_POSITIVE);
    // generators here are negative semidefinite, so a shift just above zero
    // usually works and gives fast convergence; otherwise fall back to Gershgorin
    let near_zero = 1e-8 * norm;
    let (shift, chol) = match BandedCholesky::shifted(m, near_zero) {
        Ok(chol) => (near_zero, chol),
        Err(_) => {
            let shift = m.gershgorin_upper().max(0.0) + 1e-8 * norm;
            (shift, BandedCholesky::shifted(m, shift)?)
        }
    };
    let steps = max_steps.min(n).max(1);

    // a start vector with components along every eigenvector in practice
    let mut q = DVector::from_fn(n, |i, _| 1.0 + 0.1 * (1.7 * i as f64).sin());
    q /= q.norm();
    let mut basis: Vec<DVector<f64>> = vec![q];
    let mut alphas: Vec<f64> = Vec::new();
    let mut betas: Vec<f64> = Vec::new();
    let mut ritz = None;
    for k in 0..steps {
        let mut w = basis[k].clone();
        chol.solve_in_place(w.as_mut_slice());
        let alpha = basis[k].dot(&w);
        w.axpy(-alpha, &basis[k], 1.0);
        if k > 0 {
            w.axpy(-betas[k - 1], &basis[k - 1], 1.0);
        }
        for _ in 0..2 {
            for b in &basis {
                let c = b.dot(&w);
                w.axpy(-c, b, 1.0);
            }
        }
        alphas.push(alpha);
        let beta = w.norm();
        let dim = alphas.len();
        let check =
            dim >= 2 && (dim.is_multiple_of(4) || k + 1 == steps) || beta < 1e-300 || dim == n;
        if check {
            let t = DMatrix::from_fn(dim, dim, |i, j| {
                if i == j {
                    alphas[i]
                } else if i + 1 == j {
                    betas[i]
                } else if j + 1 == i {
                    betas[j]
                } else {
                    0.0
                }
            });
            let eig = SymmetricEigen::new(t);
            let mut order: Vec<usize> = (0..dim).collect();
            order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
            let top = eig.eigenvalues[order[0]];
            let bound = |i: usize| beta * eig.eigenvectors[(dim - 1, order[i])].abs();
            let converged = bound(0) <= 1e-13 * top && (dim < 2 || bound(1) <= 1e-10 * top);
            let exhausted = beta < 1e-14 * top || dim == n;
            if converged || exhausted || k + 1 == steps {
                let coeffs = eig.eigenvectors.column(order[0]).into_owned();
                let second = order.get(1).map(|&i| eig.eigenvalues[i]);
                ritz = Some((coeffs, second, converged || exhausted));
                break;
            }
        }
        betas.push(beta);
        basis.push(w / beta);
    }
    let (coeffs, second_ritz, converged) = ritz.expect("loop always records a Ritz pair");
    if !converged {
        log::warn!("shift-invert Lanczos stopped after {steps} steps before full convergence");
    }
    let mut v = DVector::zeros(n);
    for (i, c) in coeffs.iter().enumerate() {
        v.axpy(*c, &basis[i], 1.0);
    }
    v /= v.norm();
    let value = v.dot(&m.apply(&v));
    Ok(TopEigen {
        value,
        vector: v,
        second: second_ritz.map(|r| shift - 1.0 / r),
    })
}
