use nalgebra::{DMatrix, DVector, SymmetricEigen};
use proptest::prelude::*;

use rwg::continuum::{
    h1_eigenproblem, rayleigh_quotient, square_operator, GammaInfinity, GammaProfile, Spacing,
    SturmLiouville1D, TrialFunction,
};
use rwg::coupling::{CouplingOptions, CouplingSet, CovarianceModel};
use rwg::kernel::{CovarianceKernel1D, KernelFamily};
use rwg::mode_solver::{count_modes, ModeBasis, WaveguideSpec};
use rwg::moments::{
    assemble_triangle, initial_mean, initial_second, propagate_mean, propagate_second,
};
use rwg::spectral::growth_rates;
use rwg::stochastic::{fk_mean_power, McConfig};

/// Irreducible symmetric generator: positive rates on a path plus optional extra edges.
fn generator() -> impl Strategy<Value = DMatrix<f64>> {
    (2usize..=8)
        .prop_flat_map(|n| {
            let pairs = n * (n - 1) / 2;
            (
                Just(n),
                prop::collection::vec((0.05f64..2.0, any::<bool>()), pairs),
            )
        })
        .prop_map(|(n, draws)| {
            let mut rates = DMatrix::zeros(n, n);
            let mut it = draws.into_iter();
            for j in 0..n {
                for l in j + 1..n {
                    let (r, keep) = it.next().unwrap();
                    let r = if keep || l == j + 1 { r } else { 0.0 };
                    rates[(j, l)] = r;
                    rates[(l, j)] = r;
                }
            }
            CouplingSet::generator_from_rates(&rates)
        })
}

fn instance() -> impl Strategy<Value = (CouplingSet, Vec<f64>)> {
    generator().prop_flat_map(|gamma| {
        let n = gamma.nrows();
        (
            Just(gamma),
            prop::collection::vec(0.0f64..1.5, n),
            prop::collection::vec(0.05f64..1.0, n),
        )
            .prop_map(|(gamma, lambda, amps)| {
                (
                    CouplingSet::from_rates(gamma, DVector::from_vec(lambda)).unwrap(),
                    amps,
                )
            })
    })
}

fn relative(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / b.amax().max(f64::MIN_POSITIVE)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn guided_modes_are_well_formed(n in 1.01f64..3.0, kd in 0.5f64..40.0) {
        let spec = WaveguideSpec::new(n, 1.0, kd, 0.0).unwrap();
        let basis = ModeBasis::new(spec).unwrap();
        let v = spec.v_number();
        prop_assert!(count_modes(&spec).unwrap().roots >= 1);
        for m in &basis.modes {
            prop_assert!(m.dispersion_residual(&spec) < 1e-12);
            prop_assert!(m.sigma < v);
            for x in [0.1, 0.37, 0.9, 1.7] {
                let sign = if m.j % 2 == 0 { 1.0 } else { -1.0 };
                let (plus, minus) = (m.eval(&spec, x), m.eval(&spec, -x));
                prop_assert!((minus - sign * plus).abs() <= 1e-14 * plus.abs().max(1.0));
            }
        }
        for w in basis.modes.windows(2) {
            prop_assert!(w[1].sigma > w[0].sigma);
            prop_assert!(w[1].beta < w[0].beta);
        }
    }

    #[test]
    fn semigroup_property((c, amps) in instance(), z1 in 0.0f64..2.0, z2 in 0.0f64..2.0) {
        let q0 = initial_mean(&amps);
        let twice = propagate_mean(&c, &propagate_mean(&c, &q0, z1).unwrap(), z2).unwrap();
        let once = propagate_mean(&c, &q0, z1 + z2).unwrap();
        prop_assert!(relative(&twice, &once) < 1e-10);
        let tri = assemble_triangle(&c);
        let s0 = initial_second(&amps);
        let twice = propagate_second(&tri, &propagate_second(&tri, &s0, z1).unwrap(), z2).unwrap();
        let once = propagate_second(&tri, &s0, z1 + z2).unwrap();
        prop_assert!(relative(&twice, &once) < 1e-10);
    }

    #[test]
    fn total_mean_power_never_increases((c, amps) in instance()) {
        let q0 = initial_mean(&amps);
        let mut prev = q0.sum();
        for i in 1..=10 {
            let total = propagate_mean(&c, &q0, 0.3 * i as f64).unwrap().sum();
            prop_assert!(total <= prev * (1.0 + 1e-12));
            prev = total;
        }
    }

    #[test]
    fn lossless_systems_conserve_power((c, amps) in instance(), z in 0.1f64..20.0) {
        let c = CouplingSet::from_rates(c.gamma.clone(), DVector::zeros(c.len())).unwrap();
        let q0 = initial_mean(&amps);
        let q = propagate_mean(&c, &q0, z).unwrap();
        prop_assert!((q.sum() - q0.sum()).abs() < 1e-10 * q0.sum());
        let s0 = initial_second(&amps);
        let s = propagate_second(&assemble_triangle(&c), &s0, z).unwrap();
        prop_assert!((s.sum() - s0.sum()).abs() < 1e-10 * s0.sum());
    }

    #[test]
    fn cauchy_schwarz_holds((c, amps) in instance(), z in 0.0f64..5.0) {
        let q = propagate_mean(&c, &initial_mean(&amps), z).unwrap();
        let tri = assemble_triangle(&c);
        let s = propagate_second(&tri, &initial_second(&amps), z).unwrap();
        for j in 0..c.len() {
            prop_assert!(s[tri.index.index(j, j)] >= q[j] * q[j] - 1e-10);
        }
    }

    #[test]
    fn growth_rate_gap_is_nonpositive((c, _) in instance()) {
        prop_assert!(growth_rates(&c).unwrap().gap <= 1e-10);
    }

    #[test]
    fn constant_dissipation_shift((c, _) in instance(), shift in 0.0f64..3.0) {
        let base = growth_rates(&c).unwrap();
        let shifted = CouplingSet::from_rates(c.gamma.clone(), c.lambda.add_scalar(shift)).unwrap();
        let moved = growth_rates(&shifted).unwrap();
        prop_assert!((moved.lambda - base.lambda - shift).abs() < 1e-10 * (1.0 + shift));
        prop_assert!((moved.mu - base.mu - 2.0 * shift).abs() < 1e-10 * (1.0 + shift));
        prop_assert!((&moved.v - &base.v).amax() < 1e-10);
        prop_assert!((&moved.w - &base.w).amax() < 1e-10);
    }

    #[test]
    fn joint_scaling((c, _) in instance(), s in 0.1f64..10.0) {
        let base = growth_rates(&c).unwrap();
        let scaled = growth_rates(&CouplingSet::from_rates(&c.gamma * s, &c.lambda * s).unwrap()).unwrap();
        prop_assert!((scaled.lambda - s * base.lambda).abs() < 1e-10 * s * (1.0 + base.lambda));
        prop_assert!((scaled.mu - s * base.mu).abs() < 1e-10 * s * (1.0 + base.mu));
        prop_assert!((&scaled.v - &base.v).amax() < 1e-10);
        prop_assert!((&scaled.w - &base.w).amax() < 1e-10);
    }

    #[test]
    fn sturm_liouville_is_symmetric_nsd(l in 0.2f64..3.0, m in 16usize..48) {
        let gamma = GammaInfinity::new(GammaProfile::TypeII {
            n: 1.5,
            d: 1.0,
            kernel: CovarianceKernel1D::gaussian(1.0, l).unwrap(),
            spacing: Spacing::Exact,
        })
        .unwrap();
        let a = SturmLiouville1D::new(&gamma, m).unwrap().matrix().to_dense();
        prop_assert!((&a - a.transpose()).amax() == 0.0);
        // The top eigenvalue can sit near 1e-16 |A| below zero, so its computed
        // sign is roundoff. Check definiteness through irreducible diagonal
        // dominance of K = D^{1/2} A D^{1/2}: zero row sums except a strictly
        // dominant last row.
        let w = |i: usize| if i == 0 { std::f64::consts::FRAC_1_SQRT_2 } else { 1.0 };
        let k = DMatrix::from_fn(m, m, |i, j| w(i) * a[(i, j)] * w(j));
        prop_assert!((0..m - 1).all(|i| a[(i, i + 1)] > 0.0));
        prop_assert!((0..m).all(|i| k[(i, i)] < 0.0));
        for i in 0..m - 1 {
            let row: f64 = k.row(i).sum();
            prop_assert!(row.abs() <= 1e-13 * k[(i, i)].abs(), "row {} sums to {:e}", i, row);
        }
        prop_assert!(-k.row(m - 1).sum() > 1e-13 * k[(m - 1, m - 1)].abs());
        let ev = SymmetricEigen::new(a.clone()).eigenvalues;
        prop_assert!(ev.max() < 1e-12 * a.amax());
        let mut sorted: Vec<f64> = ev.iter().copied().collect();
        sorted.sort_by(f64::total_cmp);
        // a Jacobi matrix with nonzero off-diagonals has simple eigenvalues
        prop_assert!(sorted[m - 1] > sorted[m - 2]);
    }

    #[test]
    fn rayleigh_quotient_bounds_lambda(coefs in prop::collection::vec(-1.0f64..1.0, 1..4), value in 0.2f64..3.0) {
        // phi(u) = (1 - u) (1 + sum c_k u^(k+1)) satisfies phi(1) = 0
        let mut poly = vec![1.0; 1];
        poly.extend(coefs.iter().copied());
        let mut coefficients = vec![0.0; poly.len() + 1];
        for (k, c) in poly.iter().enumerate() {
            coefficients[k] += c;
            coefficients[k + 1] -= c;
        }
        let trial = TrialFunction::Polynomial { coefficients };
        prop_assume!((0..=20).any(|i| trial.value(i as f64 / 20.0).abs() > 1e-3));
        let gamma = GammaInfinity::constant(value).unwrap();
        let bound = rayleigh_quotient(&gamma, &trial).unwrap();
        let lambda = h1_eigenproblem(&gamma, 128).unwrap().lambda_extrapolated;
        prop_assert!(bound >= lambda - 1e-6, "{bound} < {lambda}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn coupling_generator_and_variance_scaling(n in 1.2f64..2.2, k in 4.0f64..9.0, l in 0.3f64..2.0, factor in 0.1f64..5.0, exponential in any::<bool>()) {
        let family = if exponential { KernelFamily::Exponential } else { KernelFamily::Gaussian };
        let basis = ModeBasis::new(WaveguideSpec::new(n, 1.0, k, 0.0).unwrap()).unwrap();
        prop_assume!(basis.len() >= 2);
        let model = CovarianceModel::TypeII { kernel: CovarianceKernel1D::new(family, 0.5, l).unwrap() };
        let opts = CouplingOptions::default();
        let c = CouplingSet::compute(&basis, &model, &opts).unwrap();
        let scale = c.gamma.amax();
        for j in 0..c.len() {
            prop_assert!(c.gamma.row(j).sum().abs() <= 1e-12 * scale);
            for l in 0..c.len() {
                if j != l {
                    prop_assert!(c.gamma[(j, l)] > 0.0);
                }
            }
        }
        let scaled = CouplingSet::compute(&basis, &model.scaled(factor), &opts).unwrap();
        let close = |a: &DMatrix<f64>, b: &DMatrix<f64>| (a * factor - b).amax() <= 1e-12 * (b.amax() + f64::MIN_POSITIVE);
        let close_v = |a: &DVector<f64>, b: &DVector<f64>| (a * factor - b).amax() <= 1e-12 * (b.amax() + f64::MIN_POSITIVE);
        prop_assert!(close(&c.gamma, &scaled.gamma));
        prop_assert!(close(&c.gamma_s, &scaled.gamma_s));
        prop_assert!(close(&c.gamma1, &scaled.gamma1));
        prop_assert!(close_v(&c.lambda, &scaled.lambda));
        prop_assert!(close_v(&c.lambda_s, &scaled.lambda_s));
        prop_assert!(close_v(&c.kappa, &scaled.kappa));
    }

    #[test]
    fn tensor_sum_spectrum(m in 16usize..24) {
        let gamma = GammaInfinity::constant(1.0).unwrap();
        let op = SturmLiouville1D::new(&gamma, m).unwrap();
        let one: Vec<f64> = SymmetricEigen::new(op.matrix().to_dense()).eigenvalues.iter().copied().collect();
        let mut sums: Vec<f64> = one.iter().flat_map(|a| one.iter().map(move |b| a + b)).collect();
        let mut two: Vec<f64> = SymmetricEigen::new(square_operator(&op).to_dense()).eigenvalues.iter().copied().collect();
        sums.sort_by(f64::total_cmp);
        two.sort_by(f64::total_cmp);
        let scale = two.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        for (a, b) in sums.iter().zip(&two) {
            prop_assert!((a - b).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn fk_estimates_are_reproducible((c, amps) in instance(), seed in any::<u64>()) {
        let cfg = McConfig { paths: 300, seed, dz: 1e-3, z_max: 1.0, keep_paths: 0, renormalize: false };
        prop_assert_eq!(fk_mean_power(&c, &amps, 1.0, &cfg).unwrap(), fk_mean_power(&c, &amps, 1.0, &cfg).unwrap());
    }
}

#[test]
fn fk_z_scores_are_standard_normal() {
    use rwg::stochastic::fk_second_moment;
    let rates = DMatrix::from_row_slice(3, 3, &[0.0, 0.9, 0.3, 0.9, 0.0, 1.2, 0.3, 1.2, 0.0]);
    let c = CouplingSet::from_rates(
        CouplingSet::generator_from_rates(&rates),
        DVector::from_vec(vec![0.2, 0.5, 0.1]),
    )
    .unwrap();
    let amps = [1.0, 0.4, 0.7];
    let z = 0.8;
    let q = propagate_mean(&c, &initial_mean(&amps), z).unwrap();
    let s = propagate_second(&assemble_triangle(&c), &initial_second(&amps), z).unwrap();
    let mut scores = Vec::new();
    for seed in 0..50 {
        let cfg = McConfig {
            paths: 2000,
            seed,
            dz: 1e-3,
            z_max: z,
            keep_paths: 0,
            renormalize: false,
        };
        scores.extend(
            fk_mean_power(&c, &amps, z, &cfg)
                .unwrap()
                .z_scores(q.as_slice()),
        );
        scores.extend(
            fk_second_moment(&c, &amps, z, &cfg)
                .unwrap()
                .z_scores(s.as_slice()),
        );
    }
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let outliers = scores.iter().filter(|z| z.abs() > 3.0).count() as f64 / scores.len() as f64;
    assert!(mean.abs() < 0.5, "mean z {mean}");
    assert!(outliers < 0.02, "outlier fraction {outliers}");
}
