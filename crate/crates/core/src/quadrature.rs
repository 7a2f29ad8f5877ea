//! Gauss–Legendre rules and an adaptive Gauss–Kronrod (7/15) integrator.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Gauss–Legendre nodes and weights on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(order: usize) -> Self {
        assert!(order >= 1, "Gauss-Legendre order must be at least 1");
        let n = order;
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            // Tricomi initial guess, then Newton on P_n.
            let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, x);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            nodes[n - 1 - i] = x;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        if n % 2 == 1 {
            nodes[n / 2] = 0.0;
        }
        Self { nodes, weights }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    /// Nodes and weights mapped onto [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(x, w)| (mid + half * x, half * w))
    }

    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }

    /// Composite rule over `panels` equal panels.
    pub fn integrate_panels<F: FnMut(f64) -> f64>(
        &self,
        a: f64,
        b: f64,
        panels: usize,
        mut f: F,
    ) -> f64 {
        let panels = panels.max(1);
        let h = (b - a) / panels as f64;
        (0..panels)
            .map(|p| {
                let lo = a + h * p as f64;
                self.integrate(lo, lo + h, &mut f)
            })
            .sum()
    }

    /// Nodes and weights of the composite rule on [a, b].
    pub fn composite_nodes(&self, a: f64, b: f64, panels: usize) -> Vec<(f64, f64)> {
        let panels = panels.max(1);
        let h = (b - a) / panels as f64;
        (0..panels)
            .flat_map(|p| {
                let lo = a + h * p as f64;
                self.mapped(lo, lo + h).collect::<Vec<_>>()
            })
            .collect()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_5,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_48,
    0.000_000_000_000_000_000_000_000_000_000_000,
];

const WGK: [f64; 8] = [
    0.022_935_322_010_529_224,
    0.063_092_092_629_978_56,
    0.104_790_010_322_250_19,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_42,
    0.204_432_940_075_298_89,
    0.209_482_141_084_727_82,
];

const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_64,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[j] * s;
        if j % 2 == 1 {
            gauss += WG[j / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

#[derive(Debug, Clone, Copy)]
pub struct AdaptiveOptions {
    pub abs_tol: f64,
    pub rel_tol: f64,
    pub max_intervals: usize,
    /// Number of equal panels the interval is split into before adapting.
    pub initial_panels: usize,
}

impl Default for AdaptiveOptions {
    fn default() -> Self {
        Self {
            abs_tol: 1e-13,
            rel_tol: 1e-12,
            max_intervals: 4000,
            initial_panels: 8,
        }
    }
}

/// Adaptive Gauss–Kronrod integration with global error control.
///
/// Returns `(estimate, error_bound)`; fails if the tolerance is not met within
/// `max_intervals` subintervals.
pub fn adaptive<F: FnMut(f64) -> f64>(
    mut f: F,
    a: f64,
    b: f64,
    opts: AdaptiveOptions,
) -> Result<(f64, f64)> {
    if a == b {
        return Ok((0.0, 0.0));
    }
    let panels = opts.initial_panels.max(1);
    let h = (b - a) / panels as f64;
    let mut heap: BinaryHeap<Interval> = (0..panels)
        .map(|p| {
            let lo = a + h * p as f64;
            let hi = if p + 1 == panels { b } else { lo + h };
            let (value, error) = gk15(&mut f, lo, hi);
            Interval {
                lo,
                hi,
                value,
                error,
            }
        })
        .collect();
    let mut total: f64 = heap.iter().map(|w| w.value).sum();
    let mut err: f64 = heap.iter().map(|w| w.error).sum();
    loop {
        let tol = opts.abs_tol.max(opts.rel_tol * total.abs());
        if err <= tol || heap.len() >= opts.max_intervals {
            // resum to shed drift from the running updates
            total = heap.iter().map(|w| w.value).sum();
            err = heap.iter().map(|w| w.error).sum();
            let tol = opts.abs_tol.max(opts.rel_tol * total.abs());
            if err <= tol {
                return Ok((total, err));
            }
            if heap.len() >= opts.max_intervals {
                return Err(Error::Quadrature {
                    estimate: total,
                    error_bound: err,
                });
            }
        }
        let worst = heap.pop().expect("work list is non-empty");
        let mid = 0.5 * (worst.lo + worst.hi);
        let (v1, e1) = gk15(&mut f, worst.lo, mid);
        let (v2, e2) = gk15(&mut f, mid, worst.hi);
        total += v1 + v2 - worst.value;
        err += e1 + e2 - worst.error;
        heap.push(Interval {
            lo: worst.lo,
            hi: mid,
            value: v1,
            error: e1,
        });
        heap.push(Interval {
            lo: mid,
            hi: worst.hi,
            value: v2,
            error: e2,
        });
    }
}

struct Interval {
    lo: f64,
    hi: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Interval {
    fn eq(&self, other: &Self) -> bool {
        self.error.total_cmp(&other.error).is_eq()
    }
}

impl Eq for Interval {}

impl PartialOrd for Interval {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Interval {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Adaptive integration with default tolerances, panicking-free convenience
/// wrapper that returns the best estimate even when tolerance is not reached.
pub fn adaptive_estimate<F: FnMut(f64) -> f64>(f: F, a: f64, b: f64, opts: AdaptiveOptions) -> f64 {
    match adaptive(f, a, b, opts) {
        Ok((v, _)) => v,
        Err(Error::Quadrature { estimate, .. }) => estimate,
        Err(_) => unreachable!("adaptive only reports quadrature errors"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let rule = GaussLegendre::new(10);
        // degree 19 is exact for a 10-point rule
        let v = rule.integrate(-1.0, 2.0, |x| x.powi(19));
        let exact = (2f64.powi(20) - 1.0) / 20.0;
        assert!((v - exact).abs() < 1e-9 * exact);
        let w: f64 = rule.weights.iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn high_order_rule_is_symmetric() {
        let rule = GaussLegendre::new(64);
        for i in 0..64 {
            assert!((rule.nodes[i] + rule.nodes[63 - i]).abs() < 1e-15);
            assert!(rule.weights[i] > 0.0);
        }
    }

    #[test]
    fn adaptive_handles_oscillatory_integrand() {
        let (v, err) =
            adaptive(|x| (40.0 * x).cos(), 0.0, 3.0, AdaptiveOptions::default()).unwrap();
        let exact = (120.0f64).sin() / 40.0;
        assert!((v - exact).abs() < 1e-12, "{v} vs {exact}");
        assert!(err < 1e-11);
    }

    #[test]
    fn adaptive_reports_non_convergence() {
        let opts = AdaptiveOptions {
            max_intervals: 2,
            initial_panels: 1,
            ..Default::default()
        };
        let r = adaptive(|x| 1.0 / x.sqrt(), 0.0, 1.0, opts);
        assert!(matches!(r, Err(Error::Quadrature { .. })));
    }
}
