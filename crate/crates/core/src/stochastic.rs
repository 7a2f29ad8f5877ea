//! Monte Carlo oracles: Feynman-Kac jump-process estimators for the first and
//! second moments, and an Euler scheme for the limiting amplitude SDE.
//!
//! Every path draws from its own ChaCha8 stream (`stream = path index`), and
//! paths are reduced in fixed-size blocks merged in block order, so estimates
//! are bit-identical for a given seed whatever the thread count.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::coupling::CouplingSet;
use crate::error::{invalid, Error, Result};
use crate::moments::{initial_mean, initial_second, theta_row, TriangleIndex};
use crate::par::map_indices;

pub const MIN_PATHS: usize = 100;
/// Upper bound on `dz * max(|Gamma_jj|, Lambda_j, Gamma1_jj)`.
pub const STEP_LIMIT: f64 = 0.05;
const BLOCK: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    pub paths: usize,
    pub seed: u64,
    pub dz: f64,
    pub z_max: f64,
    /// Number of SDE sample paths returned in full.
    #[serde(default)]
    pub keep_paths: usize,
    /// Rescale after each coupling increment so it conserves total power.
    #[serde(default)]
    pub renormalize: bool,
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.paths < MIN_PATHS {
            return Err(invalid(
                "mc.paths",
                format!("must be >= {MIN_PATHS}, got {}", self.paths),
            ));
        }
        if !(self.dz.is_finite() && self.dz > 0.0) {
            return Err(invalid("mc.dz", format!("must be > 0, got {}", self.dz)));
        }
        if !(self.z_max.is_finite() && self.z_max >= 0.0) {
            return Err(invalid(
                "mc.z_max",
                format!("must be >= 0, got {}", self.z_max),
            ));
        }
        Ok(())
    }
}

/// Componentwise sample mean with standard error `sd / sqrt(paths)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub paths_used: usize,
}

impl McEstimate {
    /// `(mean - truth) / stderr`, with exact matches mapped to zero.
    pub fn z_scores(&self, truth: &[f64]) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.stderr)
            .zip(truth)
            .map(|((m, s), t)| {
                let diff = m - t;
                if *s > 0.0 {
                    diff / s
                } else if diff.abs() <= 1e-12 * t.abs().max(1e-300) {
                    0.0
                } else {
                    f64::INFINITY.copysign(diff)
                }
            })
            .collect()
    }
}

/// Running mean and sum of squared deviations per component.
#[derive(Debug, Clone)]
struct Accumulator {
    count: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Accumulator {
    fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    fn push(&mut self, sample: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(sample) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    fn merge(&mut self, other: &Accumulator) {
        if other.count == 0 {
            return;
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let total = na + nb;
        for i in 0..self.mean.len() {
            let delta = other.mean[i] - self.mean[i];
            self.mean[i] += delta * nb / total;
            self.m2[i] += other.m2[i] + delta * delta * na * nb / total;
        }
        self.count += other.count;
    }

    fn estimate(&self) -> McEstimate {
        let n = self.count as f64;
        McEstimate {
            mean: self.mean.clone(),
            stderr: self
                .m2
                .iter()
                .map(|s| {
                    if self.count > 1 {
                        (s / (n - 1.0) / n).sqrt()
                    } else {
                        0.0
                    }
                })
                .collect(),
            paths_used: self.count,
        }
    }
}

pub(crate) fn path_rng(seed: u64, path: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    rng
}

/// Runs `sample(path, &mut out)` over all paths in blocks and merges the
/// per-block accumulators in block order.
fn run_paths<F>(paths: usize, dims: &[usize], sample: F) -> Vec<McEstimate>
where
    F: Fn(usize, &mut [Vec<f64>]) + Sync + Send,
{
    let blocks = paths.div_ceil(BLOCK);
    let partial = map_indices(blocks, |b| {
        let mut accs: Vec<Accumulator> = dims.iter().map(|&d| Accumulator::new(d)).collect();
        let mut buffers: Vec<Vec<f64>> = dims.iter().map(|&d| vec![0.0; d]).collect();
        for path in b * BLOCK..((b + 1) * BLOCK).min(paths) {
            sample(path, &mut buffers);
            for (acc, buf) in accs.iter_mut().zip(&buffers) {
                acc.push(buf);
            }
        }
        accs
    });
    let mut total: Vec<Accumulator> = dims.iter().map(|&d| Accumulator::new(d)).collect();
    for accs in &partial {
        for (t, a) in total.iter_mut().zip(accs) {
            t.merge(a);
        }
    }
    total.iter().map(Accumulator::estimate).collect()
}

/// Continuous-time Markov chain with killing, from a symmetric generator.
#[derive(Debug, Clone)]
pub struct JumpProcess {
    /// Outgoing `(target, rate)` per state.
    transitions: Vec<Vec<(usize, f64)>>,
    exit_rates: Vec<f64>,
    killing: Vec<f64>,
}

impl JumpProcess {
    /// `rows[i]` lists off-diagonal generator entries of state `i`.
    pub fn new(rows: Vec<Vec<(usize, f64)>>, killing: Vec<f64>) -> Result<Self> {
        let mut transitions = Vec::with_capacity(rows.len());
        let mut exit_rates = Vec::with_capacity(rows.len());
        for (i, row) in rows.into_iter().enumerate() {
            let mut out = Vec::new();
            for (j, rate) in row {
                if !(rate.is_finite() && rate >= 0.0) {
                    return Err(Error::InvalidGenerator(format!(
                        "rate {rate} from {i} to {j}"
                    )));
                }
                if rate > 0.0 && j != i {
                    out.push((j, rate));
                }
            }
            exit_rates.push(out.iter().map(|(_, r)| r).sum());
            transitions.push(out);
        }
        Ok(Self {
            transitions,
            exit_rates,
            killing,
        })
    }

    /// Final state and `exp(-int killing)` after running for `z` from `start`.
    pub fn run<R: Rng>(&self, start: usize, z: f64, rng: &mut R) -> (usize, f64) {
        let mut state = start;
        let mut t = 0.0;
        let mut exposure = 0.0;
        loop {
            let rate = self.exit_rates[state];
            let hold = if rate > 0.0 {
                -(1.0 - rng.random::<f64>()).ln() / rate
            } else {
                f64::INFINITY
            };
            if t + hold >= z {
                exposure += self.killing[state] * (z - t);
                return (state, (-exposure).exp());
            }
            exposure += self.killing[state] * hold;
            t += hold;
            let mut target = rng.random::<f64>() * rate;
            let mut next = self.transitions[state]
                .last()
                .expect("positive exit rate")
                .0;
            for &(j, r) in &self.transitions[state] {
                if target < r {
                    next = j;
                    break;
                }
                target -= r;
            }
            state = next;
        }
    }

    /// `E[payoff(X_z) exp(-int killing) | X_0 = i]` for every `i`, with the
    /// same random stream reused across starting states.
    pub fn feynman_kac(&self, payoff: &[f64], z: f64, cfg: &McConfig) -> Result<McEstimate> {
        cfg.validate()?;
        let states = self.exit_rates.len();
        let estimates = run_paths(cfg.paths, &[states], |path, out| {
            for (start, slot) in out[0].iter_mut().enumerate() {
                let mut rng = path_rng(cfg.seed, path);
                let (end, weight) = self.run(start, z, &mut rng);
                *slot = payoff[end] * weight;
            }
        });
        Ok(estimates.into_iter().next().expect("one estimate"))
    }
}

fn mean_process(coupling: &CouplingSet) -> Result<JumpProcess> {
    coupling.validate_generator()?;
    let n = coupling.len();
    let rows = (0..n)
        .map(|j| {
            (0..n)
                .filter(|&l| l != j)
                .map(|l| (l, coupling.gamma[(j, l)].max(0.0)))
                .collect()
        })
        .collect();
    JumpProcess::new(rows, coupling.lambda.iter().copied().collect())
}

/// Walk on the triangle `{j <= l}` with rates read off `Theta` and killing `Lambda_j + Lambda_l`.
fn triangle_process(coupling: &CouplingSet) -> Result<JumpProcess> {
    coupling.validate_generator()?;
    let gamma = coupling.gamma.map(|g| g.max(0.0));
    let index = TriangleIndex::new(coupling.len());
    let mut rows = Vec::with_capacity(index.len());
    let mut killing = Vec::with_capacity(index.len());
    for (row, (j, l)) in index.pairs().enumerate() {
        let (entries, _) = theta_row(&gamma, &index, j, l);
        let mut merged: Vec<(usize, f64)> = Vec::new();
        for (col, rate) in entries {
            if col == row || rate == 0.0 {
                continue;
            }
            match merged.iter_mut().find(|(c, _)| *c == col) {
                Some(slot) => slot.1 += rate,
                None => merged.push((col, rate)),
            }
        }
        rows.push(merged);
        killing.push(coupling.lambda[j] + coupling.lambda[l]);
    }
    JumpProcess::new(rows, killing)
}

/// Feynman-Kac estimate of `Q(z)` with payoff `|a_j|^2`.
pub fn fk_mean_power(
    coupling: &CouplingSet,
    amplitudes: &[f64],
    z: f64,
    cfg: &McConfig,
) -> Result<McEstimate> {
    check_len(coupling.len(), amplitudes.len())?;
    let payoff: Vec<f64> = initial_mean(amplitudes).iter().copied().collect();
    mean_process(coupling)?.feynman_kac(&payoff, z, cfg)
}

/// Feynman-Kac estimate of `S(z)` in triangle order, with payoff `S_jl(0) = (2 - delta_jl) |a_j|^2 |a_l|^2`.
pub fn fk_second_moment(
    coupling: &CouplingSet,
    amplitudes: &[f64],
    z: f64,
    cfg: &McConfig,
) -> Result<McEstimate> {
    check_len(coupling.len(), amplitudes.len())?;
    let payoff: Vec<f64> = initial_second(amplitudes).iter().copied().collect();
    triangle_process(coupling)?.feynman_kac(&payoff, z, cfg)
}

fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// Precomputed coefficients of one SDE step.
#[derive(Debug, Clone)]
struct SdeStepper {
    n: usize,
    dz: f64,
    renormalize: bool,
    /// `exp(dz/2 Gamma_jj)`.
    exchange: Vec<f64>,
    /// `exp(dz/2 (i Gamma^s_jj - Lambda_j - i Lambda^s_j + i kappa_j))`.
    drift: Vec<Complex64>,
    /// Symmetric square root of `Gamma1`.
    phase_root: DMatrix<f64>,
    /// `sqrt(Gamma_jl / 2)` for `j < l`.
    coupling: Vec<(usize, usize, f64)>,
}

/// Symmetric square root of a PSD matrix; eigenvalues in `(-1e-10 |M|, 0)` are clamped.
fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let mut clamped = 0;
    let roots = eig.eigenvalues.map(|v| {
        if v < 0.0 {
            clamped += 1;
            0.0
        } else {
            v.sqrt()
        }
    });
    if let Some(&worst) = eig
        .eigenvalues
        .iter()
        .filter(|&&v| v < -1e-10 * scale)
        .min_by(|a, b| a.total_cmp(b))
    {
        return Err(Error::NotPsd {
            min_eigenvalue: worst,
        });
    }
    if clamped > 0 {
        log::warn!("Gamma1: {clamped} slightly negative eigenvalues clamped to zero");
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

impl SdeStepper {
    fn new(coupling: &CouplingSet, dz: f64, renormalize: bool) -> Result<Self> {
        coupling.validate_generator()?;
        let n = coupling.len();
        let worst = (0..n)
            .map(|j| {
                coupling.gamma[(j, j)]
                    .abs()
                    .max(coupling.lambda[j])
                    .max(coupling.gamma1[(j, j)])
            })
            .fold(0.0, f64::max);
        if dz * worst > STEP_LIMIT {
            return Err(Error::StepSize {
                product: dz * worst,
                limit: STEP_LIMIT,
            });
        }
        let drift = (0..n)
            .map(|j| {
                let re = -coupling.lambda[j];
                let im = coupling.gamma_s[(j, j)] - coupling.lambda_s[j] + coupling.kappa[j];
                (Complex64::new(re, im) * (0.5 * dz)).exp()
            })
            .collect();
        let mut pairs = Vec::new();
        for j in 0..n {
            for l in j + 1..n {
                let g = coupling.gamma[(j, l)];
                if g > 0.0 {
                    pairs.push((j, l, (0.5 * g).sqrt()));
                }
            }
        }
        Ok(Self {
            n,
            dz,
            renormalize,
            exchange: (0..n)
                .map(|j| (0.5 * dz * coupling.gamma[(j, j)]).exp())
                .collect(),
            drift,
            phase_root: psd_sqrt(&coupling.gamma1)?,
            coupling: pairs,
        })
    }

    /// One step: Euler increment of the coupling noise with its drift
    /// `Gamma_jj / 2`, then the exact diagonal phase noise `exp(i dW1_j)` and
    /// the remaining drift factor.
    ///
    /// The exact coupling flow conserves `sum_j |a_j|^2` path by path; the Euler
    /// increment only does so in expectation unless `renormalize` is set.
    ///
    /// The diagonal noise `i a dW1` with its Ito correction `-Gamma1_jj / 2`
    /// integrates to `exp(i W1)` exactly, so neither appears in the drift factor.
    fn step<R: Rng>(
        &self,
        a: &mut [Complex64],
        scratch: &mut [Complex64],
        noise: &mut [f64],
        rng: &mut R,
    ) {
        let sq = self.dz.sqrt();
        scratch.copy_from_slice(a);
        for &(j, l, c) in &self.coupling {
            let dw: f64 = rng.sample::<f64, _>(StandardNormal) * sq;
            let dw_tilde: f64 = rng.sample::<f64, _>(StandardNormal) * sq;
            // W_lj = W_jl, W~_lj = -W~_jl
            scratch[j] += a[l] * Complex64::new(-dw_tilde, dw) * c;
            scratch[l] += a[j] * Complex64::new(dw_tilde, dw) * c;
        }
        for (x, e) in scratch.iter_mut().zip(&self.exchange) {
            *x *= *e;
        }
        if self.renormalize {
            let before: f64 = a.iter().map(|x| x.norm_sqr()).sum();
            let after: f64 = scratch.iter().map(|x| x.norm_sqr()).sum();
            if after > 0.0 {
                let scale = (before / after).sqrt();
                scratch.iter_mut().for_each(|x| *x *= scale);
            }
        }
        for x in noise.iter_mut() {
            *x = rng.sample::<f64, _>(StandardNormal) * sq;
        }
        for j in 0..self.n {
            let phase: f64 = (0..self.n)
                .map(|m| self.phase_root[(j, m)] * noise[m])
                .sum();
            a[j] = scratch[j] * Complex64::from_polar(1.0, phase) * self.drift[j];
        }
    }
}

/// Mean powers of the discrete scheme itself, by the exact recursion
/// `Q'_j = exp((Gamma_jj - Lambda_j) dz) (Q_j + dz sum_{m != j} Gamma_jm Q_m)`.
pub fn sde_scheme_mean(
    coupling: &CouplingSet,
    amplitudes: &[f64],
    dz: f64,
    steps: usize,
) -> Result<DVector<f64>> {
    check_len(coupling.len(), amplitudes.len())?;
    let n = coupling.len();
    let mut q = initial_mean(amplitudes);
    let decay = DVector::from_fn(n, |j, _| {
        ((coupling.gamma[(j, j)] - coupling.lambda[j]) * dz).exp()
    });
    for _ in 0..steps {
        let mut next = q.clone();
        for j in 0..n {
            let inflow: f64 = (0..n)
                .filter(|&m| m != j)
                .map(|m| coupling.gamma[(j, m)] * q[m])
                .sum();
            next[j] = decay[j] * (q[j] + dz * inflow);
        }
        q = next;
    }
    Ok(q)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeCheckpoint {
    pub z: f64,
    pub step: usize,
    /// `E[P_j]`.
    pub mean_power: McEstimate,
    /// `E[P_j P_l]` in triangle order.
    pub power_products: McEstimate,
    /// `sum_j P_j`.
    pub total_power: McEstimate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePath {
    pub path: usize,
    /// `(re, im)` of every amplitude at each checkpoint.
    pub amplitudes: Vec<Vec<(f64, f64)>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdeResult {
    pub seed: u64,
    pub paths: usize,
    pub dz: f64,
    pub checkpoints: Vec<SdeCheckpoint>,
    pub samples: Vec<SamplePath>,
}

/// Integrates the amplitude SDE to `cfg.z_max`, recording moments at each
/// checkpoint (rounded to the nearest step).
pub fn simulate_sde(
    coupling: &CouplingSet,
    amplitudes: &[f64],
    cfg: &McConfig,
    checkpoints: &[f64],
) -> Result<SdeResult> {
    cfg.validate()?;
    check_len(coupling.len(), amplitudes.len())?;
    let stepper = SdeStepper::new(coupling, cfg.dz, cfg.renormalize)?;
    let n = coupling.len();
    let mut marks: Vec<usize> = checkpoints
        .iter()
        .map(|&z| {
            if !(z >= 0.0 && z <= cfg.z_max + 0.5 * cfg.dz) {
                Err(invalid("run.z", format!("{z} outside [0, z_max]")))
            } else {
                Ok((z / cfg.dz).round() as usize)
            }
        })
        .collect::<Result<_>>()?;
    if marks.is_empty() {
        marks.push((cfg.z_max / cfg.dz).round() as usize);
    }
    marks.sort_unstable();
    marks.dedup();
    let index = TriangleIndex::new(n);
    let tri = index.len();
    let mut dims = Vec::new();
    for _ in &marks {
        dims.extend([n, tri, 1]);
    }
    let simulate = |path: usize, record: &mut dyn FnMut(usize, &[Complex64])| {
        let mut rng = path_rng(cfg.seed, path);
        let mut a: Vec<Complex64> = amplitudes.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        let mut scratch = a.clone();
        let mut noise = vec![0.0; n];
        let mut step = 0;
        for (slot, &mark) in marks.iter().enumerate() {
            while step < mark {
                stepper.step(&mut a, &mut scratch, &mut noise, &mut rng);
                step += 1;
            }
            record(slot, &a);
        }
    };
    let estimates = run_paths(cfg.paths, &dims, |path, out| {
        simulate(path, &mut |slot, a| {
            let powers: Vec<f64> = a.iter().map(|x| x.norm_sqr()).collect();
            out[3 * slot].copy_from_slice(&powers);
            for (p, (j, l)) in index.pairs().enumerate() {
                out[3 * slot + 1][p] = powers[j] * powers[l];
            }
            out[3 * slot + 2][0] = powers.iter().sum();
        });
    });
    let checkpoints = marks
        .iter()
        .enumerate()
        .map(|(slot, &mark)| SdeCheckpoint {
            z: mark as f64 * cfg.dz,
            step: mark,
            mean_power: estimates[3 * slot].clone(),
            power_products: estimates[3 * slot + 1].clone(),
            total_power: estimates[3 * slot + 2].clone(),
        })
        .collect();
    let samples = (0..cfg.keep_paths.min(cfg.paths))
        .map(|path| {
            let mut amplitudes = vec![Vec::new(); marks.len()];
            simulate(path, &mut |slot, a| {
                amplitudes[slot] = a.iter().map(|x| (x.re, x.im)).collect();
            });
            SamplePath { path, amplitudes }
        })
        .collect();
    Ok(SdeResult {
        seed: cfg.seed,
        paths: cfg.paths,
        dz: cfg.dz,
        checkpoints,
        samples,
    })
}

/// `S_jl = (2 - delta_jl) E[P_j P_l]` from triangle-ordered products.
pub fn products_to_second(products: &[f64], n: usize) -> Vec<f64> {
    TriangleIndex::new(n)
        .pairs()
        .zip(products)
        .map(|((j, l), p)| if j == l { *p } else { 2.0 * p })
        .collect()
}
