//! Guided and radiating modes of the ideal step-index slab.
//!
//! The core occupies `|x| < d/2` with relative index `n > 1`; the cladding has
//! index 1. Guided modes are indexed by `j = 0..N-1` in increasing transverse
//! wavenumber `sigma_j` (decreasing propagation constant `beta_j`).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::quadrature::{adaptive, adaptive_estimate, AdaptiveOptions, GaussLegendre};

/// Modes whose cladding decay `zeta_j` falls below this are treated as being at cutoff.
pub const CUTOFF_ZETA: f64 = 1e-8;

const ROOT_TOL: f64 = 1e-13;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveguideSpec {
    /// Relative core index.
    pub n: f64,
    /// Core diameter.
    pub d: f64,
    /// Homogeneous wavenumber.
    pub k: f64,
    /// Transverse source position.
    pub x_s: f64,
}

impl WaveguideSpec {
    pub fn new(n: f64, d: f64, k: f64, x_s: f64) -> Result<Self> {
        let spec = Self { n, d, k, x_s };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.n.is_finite() && self.n > 1.0) {
            return Err(invalid(
                "waveguide.n",
                format!("must be > 1, got {}", self.n),
            ));
        }
        if !(self.d.is_finite() && self.d > 0.0) {
            return Err(invalid(
                "waveguide.d",
                format!("must be > 0, got {}", self.d),
            ));
        }
        if !(self.k.is_finite() && self.k > 0.0) {
            return Err(invalid(
                "waveguide.k",
                format!("must be > 0, got {}", self.k),
            ));
        }
        if !self.x_s.is_finite() {
            return Err(invalid("waveguide.x_s", "must be finite"));
        }
        let v = self.v_number();
        if !(v.is_finite() && v > 0.0) {
            return Err(invalid(
                "waveguide",
                format!("normalized contrast {v} is not positive"),
            ));
        }
        Ok(())
    }

    /// Normalized contrast `sqrt(n^2 - 1) k d`.
    pub fn v_number(&self) -> f64 {
        (self.n * self.n - 1.0).sqrt() * self.k * self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Parity {
    Even,
    Odd,
}

impl Parity {
    pub fn of_index(j: usize) -> Self {
        if j.is_multiple_of(2) {
            Parity::Even
        } else {
            Parity::Odd
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Parity::Even => 1.0,
            Parity::Odd => -1.0,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Parity::Even => "e",
            Parity::Odd => "o",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidedMode {
    pub j: usize,
    pub parity: Parity,
    pub sigma: f64,
    pub zeta: f64,
    pub beta: f64,
    /// Normalization constant `A_j`.
    pub norm: f64,
}

impl GuidedMode {
    fn from_root(j: usize, sigma: f64, spec: &WaveguideSpec) -> Self {
        let v = spec.v_number();
        let parity = Parity::of_index(j);
        let zeta = ((v - sigma) * (v + sigma)).max(0.0).sqrt();
        let nk = spec.n * spec.k;
        let beta = (nk * nk - (sigma / spec.d).powi(2)).sqrt();
        let half = 0.5 * sigma;
        let denom = match parity {
            Parity::Even => 0.5 + sigma.sin() / (2.0 * sigma) + half.cos().powi(2) / zeta,
            Parity::Odd => 0.5 - sigma.sin() / (2.0 * sigma) + half.sin().powi(2) / zeta,
        };
        let norm = (1.0 / (spec.d * denom)).sqrt();
        Self {
            j,
            parity,
            sigma,
            zeta,
            beta,
            norm,
        }
    }

    /// Boundary factor `cos(sigma/2)` (even) or `sin(sigma/2)` (odd).
    fn edge(&self) -> f64 {
        match self.parity {
            Parity::Even => (0.5 * self.sigma).cos(),
            Parity::Odd => (0.5 * self.sigma).sin(),
        }
    }

    /// Field value `phi_j(x)`.
    pub fn eval(&self, spec: &WaveguideSpec, x: f64) -> f64 {
        let d = spec.d;
        if x.abs() <= 0.5 * d {
            let arg = self.sigma * x / d;
            match self.parity {
                Parity::Even => self.norm * arg.cos(),
                Parity::Odd => self.norm * arg.sin(),
            }
        } else {
            let tail = self.norm * self.edge() * (-self.zeta * (x.abs() / d - 0.5)).exp();
            match self.parity {
                Parity::Even => tail,
                Parity::Odd => tail * x.signum(),
            }
        }
    }

    /// Derivative `phi_j'(x)`; at `|x| = d/2` the inside expression is used.
    pub fn eval_dx(&self, spec: &WaveguideSpec, x: f64) -> f64 {
        let d = spec.d;
        if x.abs() <= 0.5 * d {
            let arg = self.sigma * x / d;
            let s = self.norm * self.sigma / d;
            match self.parity {
                Parity::Even => -s * arg.sin(),
                Parity::Odd => s * arg.cos(),
            }
        } else {
            -self.zeta / d * x.signum() * self.eval(spec, x)
        }
    }

    /// Outside-core derivative at `x = d/2`, for checking derivative matching.
    pub fn eval_dx_outside_edge(&self, spec: &WaveguideSpec) -> f64 {
        -self.zeta / spec.d * self.norm * self.edge()
    }

    /// Root accuracy in the `sigma` variable: `|F(sigma) / F'(sigma)|` for the
    /// pole-free form of this mode's branch equation.
    pub fn dispersion_residual(&self, spec: &WaveguideSpec) -> f64 {
        let v = spec.v_number();
        let (f, df) = branch_with_derivative(self.parity, self.sigma, v);
        if df == 0.0 {
            return f.abs();
        }
        (f / df).abs()
    }
}

/// Pole-free branch functions:
/// even `sigma sin(sigma/2) - cos(sigma/2) sqrt(V^2 - sigma^2)`,
/// odd `sqrt(V^2 - sigma^2) sin(sigma/2) + sigma cos(sigma/2)`.
pub fn branch_function(parity: Parity, sigma: f64, v: f64) -> f64 {
    branch_with_derivative(parity, sigma, v).0
}

fn branch_with_derivative(parity: Parity, sigma: f64, v: f64) -> (f64, f64) {
    let r = ((v - sigma) * (v + sigma)).max(0.0).sqrt();
    let (s, c) = (0.5 * sigma).sin_cos();
    let dr = if r > 0.0 {
        -sigma / r
    } else {
        f64::NEG_INFINITY
    };
    match parity {
        Parity::Even => {
            let f = sigma * s - c * r;
            let df = s + 0.5 * sigma * c + 0.5 * s * r - c * dr;
            (f, df)
        }
        Parity::Odd => {
            let f = r * s + sigma * c;
            let df = dr * s + 0.5 * r * c + c - 0.5 * sigma * s;
            (f, df)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeCount {
    /// `floor(sqrt(n^2-1) k d / pi)`.
    pub formula: usize,
    /// Number of dispersion roots actually found (including modes at cutoff).
    pub roots: usize,
    /// Indices of roots rejected because `zeta_j < CUTOFF_ZETA`.
    pub at_cutoff: Vec<usize>,
}

impl ModeCount {
    /// Number of guided modes used downstream.
    pub fn guided(&self) -> usize {
        self.roots - self.at_cutoff.len()
    }
}

fn bracket(j: usize, v: f64) -> Option<(f64, f64)> {
    let lo = j as f64 * PI;
    let hi = ((j + 1) as f64 * PI).min(v);
    (lo < hi).then_some((lo, hi))
}

fn bisect(parity: Parity, v: f64, j: usize, lo: f64, hi: f64) -> Result<f64> {
    let mut a = lo;
    let mut b = hi;
    let mut fa = branch_function(parity, a, v);
    let fb = branch_function(parity, b, v);
    if fa == 0.0 {
        return Ok(a);
    }
    if fb == 0.0 {
        return Ok(b);
    }
    if fa.signum() == fb.signum() {
        return Err(Error::RootBracket { j, lo, hi });
    }
    while b - a > ROOT_TOL {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        let fm = branch_function(parity, m, v);
        if fm == 0.0 {
            return Ok(m);
        }
        if fm.signum() == fa.signum() {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    Ok(0.5 * (a + b))
}

fn all_roots(spec: &WaveguideSpec) -> Result<Vec<(usize, f64)>> {
    let v = spec.v_number();
    let mut roots = Vec::new();
    let mut j = 0;
    while let Some((lo, hi)) = bracket(j, v) {
        let sigma = bisect(Parity::of_index(j), v, j, lo, hi)?;
        roots.push((j, sigma));
        j += 1;
    }
    Ok(roots)
}

/// Count guided modes by the floor formula and by root counting.
pub fn count_modes(spec: &WaveguideSpec) -> Result<ModeCount> {
    spec.validate()?;
    let v = spec.v_number();
    let formula = (v / PI).floor() as usize;
    let roots = all_roots(spec)?;
    let at_cutoff = roots
        .iter()
        .filter(|(_, sigma)| ((v - sigma) * (v + sigma)).max(0.0).sqrt() < CUTOFF_ZETA)
        .map(|(j, _)| *j)
        .collect();
    Ok(ModeCount {
        formula,
        roots: roots.len(),
        at_cutoff,
    })
}

/// Solve both dispersion branches; modes at cutoff are dropped.
pub fn solve_dispersion(spec: &WaveguideSpec) -> Result<Vec<GuidedMode>> {
    spec.validate()?;
    let v = spec.v_number();
    Ok(all_roots(spec)?
        .into_iter()
        .filter(|(_, sigma)| ((v - sigma) * (v + sigma)).max(0.0).sqrt() >= CUTOFF_ZETA)
        .map(|(j, sigma)| GuidedMode::from_root(j, sigma, spec))
        .collect())
}

/// Guided modes of one waveguide together with the waveguide itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeBasis {
    pub spec: WaveguideSpec,
    pub modes: Vec<GuidedMode>,
    pub count: ModeCount,
}

impl ModeBasis {
    pub fn new(spec: WaveguideSpec) -> Result<Self> {
        let count = count_modes(&spec)?;
        let modes = solve_dispersion(&spec)?;
        Ok(Self { spec, modes, count })
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn eval(&self, j: usize, x: f64) -> f64 {
        self.modes[j].eval(&self.spec, x)
    }

    pub fn betas(&self) -> Vec<f64> {
        self.modes.iter().map(|m| m.beta).collect()
    }

    /// Values `phi_j(d/2)`.
    pub fn edge_values(&self) -> Vec<f64> {
        let h = 0.5 * self.spec.d;
        self.modes.iter().map(|m| m.eval(&self.spec, h)).collect()
    }

    /// `(phi_i, phi_j)` in L^2(R): adaptive quadrature over the core plus the
    /// closed-form exponential tails.
    pub fn inner_product(&self, i: usize, j: usize) -> f64 {
        let spec = &self.spec;
        let (mi, mj) = (&self.modes[i], &self.modes[j]);
        let h = 0.5 * spec.d;
        let core = adaptive_estimate(
            |x| mi.eval(spec, x) * mj.eval(spec, x),
            -h,
            h,
            AdaptiveOptions {
                initial_panels: 4 + (mi.sigma + mj.sigma) as usize,
                ..Default::default()
            },
        );
        let right = mi.norm * mi.edge() * mj.norm * mj.edge() * spec.d / (mi.zeta + mj.zeta);
        let mirror = if (mi.j + mj.j) % 2 == 0 { 2.0 } else { 0.0 };
        core + mirror * right
    }

    /// Source amplitudes `a_{j,s} = sqrt(beta_j)/2 phi_j(x_s)`.
    pub fn source_amplitudes(&self) -> Vec<f64> {
        self.modes
            .iter()
            .map(|m| 0.5 * m.beta.sqrt() * m.eval(&self.spec, self.spec.x_s))
            .collect()
    }
}

/// Improper eigenfunction of the continuous spectrum, `gamma < k^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RadiatingMode {
    pub parity: Parity,
    pub gamma: f64,
    pub eta: f64,
    pub xi: f64,
    pub norm: f64,
}

impl RadiatingMode {
    pub fn new(spec: &WaveguideSpec, parity: Parity, gamma: f64) -> Result<Self> {
        let k2 = spec.k * spec.k;
        if !gamma.is_finite() || gamma >= k2 {
            return Err(Error::SpectralDomain { gamma, k2 });
        }
        let eta = (spec.n * spec.n * k2 - gamma).sqrt() * spec.d;
        let xi = (k2 - gamma).sqrt() * spec.d;
        let (s, c) = (0.5 * eta).sin_cos();
        let denom = match parity {
            Parity::Even => xi * xi * c * c + eta * eta * s * s,
            Parity::Odd => xi * xi * s * s + eta * eta * c * c,
        };
        let norm = (xi * spec.d / (2.0 * PI * denom)).sqrt();
        Ok(Self {
            parity,
            gamma,
            eta,
            xi,
            norm,
        })
    }

    pub fn eval(&self, spec: &WaveguideSpec, x: f64) -> f64 {
        let d = spec.d;
        if x.abs() <= 0.5 * d {
            let arg = self.eta * x / d;
            return match self.parity {
                Parity::Even => self.norm * arg.cos(),
                Parity::Odd => self.norm * arg.sin(),
            };
        }
        let t = x.abs() / d - 0.5;
        let (s, c) = (0.5 * self.eta).sin_cos();
        let (sx, cx) = (self.xi * t).sin_cos();
        let ratio = self.eta / self.xi;
        match self.parity {
            Parity::Even => self.norm * (c * cx - ratio * s * sx),
            Parity::Odd => self.norm * x.signum() * (s * cx + ratio * c * sx),
        }
    }
}

/// `phi_{t,gamma}(x)`.
pub fn eval_radiating(spec: &WaveguideSpec, parity: Parity, gamma: f64, x: f64) -> Result<f64> {
    Ok(RadiatingMode::new(spec, parity, gamma)?.eval(spec, x))
}

/// `a_{t,gamma,s} = |gamma|^{1/4}/2 phi_{t,gamma}(x_s)`.
pub fn radiating_source_amplitude(spec: &WaveguideSpec, parity: Parity, gamma: f64) -> Result<f64> {
    let phi = eval_radiating(spec, parity, gamma, spec.x_s)?;
    Ok(0.5 * gamma.abs().powf(0.25) * phi)
}

/// Quadrature grid over the continuous spectrum `(gamma_min, k^2)`.
///
/// Integration runs in `s = sqrt(k^2 - gamma)` with a composite Gauss–Legendre
/// rule, which removes the square-root behaviour at `gamma = k^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaGrid {
    pub gamma_min: f64,
    pub panels: usize,
    pub order: usize,
}

impl GammaGrid {
    /// Grid reaching `s_max = sqrt(k^2 - gamma_min)`.
    pub fn from_s_max(spec: &WaveguideSpec, s_max: f64, panels: usize) -> Self {
        Self {
            gamma_min: spec.k * spec.k - s_max * s_max,
            panels,
            order: 16,
        }
    }
}

/// `||phi||^2 - sum_j |(phi_j,phi)|^2 - sum_t int |(phi_{t,gamma},phi)|^2 dgamma`.
///
/// `phi` is assumed negligible outside `[-half_width, half_width]`.
pub fn completeness_defect<F: Fn(f64) -> f64>(
    basis: &ModeBasis,
    phi: F,
    half_width: f64,
    grid: &GammaGrid,
) -> Result<f64> {
    let spec = &basis.spec;
    let h = 0.5 * spec.d;
    let xw = half_width.max(h);
    let opts = AdaptiveOptions {
        abs_tol: 1e-15,
        rel_tol: 1e-13,
        max_intervals: 20_000,
        initial_panels: 8,
    };
    let integrate = |g: &dyn Fn(f64) -> f64, freq: f64| -> Result<f64> {
        let panels = 8 + (freq * xw / PI) as usize;
        let o = AdaptiveOptions {
            initial_panels: panels.min(4000),
            ..opts
        };
        let mut total = 0.0;
        for (a, b) in [(-xw, -h), (-h, h), (h, xw)] {
            if b > a {
                total += adaptive(g, a, b, o)?.0;
            }
        }
        Ok(total)
    };
    let norm2 = integrate(&|x| phi(x).powi(2), 0.0)?;
    if norm2 == 0.0 {
        return Ok(0.0);
    }
    let mut guided = 0.0;
    for m in &basis.modes {
        let c = integrate(&|x| m.eval(spec, x) * phi(x), m.sigma / spec.d)?;
        guided += c * c;
    }
    let k2 = spec.k * spec.k;
    let s_max = (k2 - grid.gamma_min).max(0.0).sqrt();
    let rule = GaussLegendre::new(grid.order.max(2));
    let mut continuum = 0.0;
    for (s, w) in rule.composite_nodes(0.0, s_max, grid.panels) {
        let gamma = k2 - s * s;
        for parity in [Parity::Even, Parity::Odd] {
            let mode = RadiatingMode::new(spec, parity, gamma)?;
            let c = integrate(&|x| mode.eval(spec, x) * phi(x), mode.eta / spec.d)?;
            continuum += w * 2.0 * s * c * c;
        }
    }
    Ok(norm2 - guided - continuum)
}
