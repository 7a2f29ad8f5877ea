use log::warn;
use serde_json::{json, Value};

use rwg::continuum::{
    finite_n_convergence, h1_eigenproblem, h2_eigenproblem, variational_lambda, FiniteNFamily,
    GammaInfinity, GammaProfile, Spacing,
};
use rwg::coupling::{CouplingSet, CovarianceModel};
use rwg::mode_solver::ModeBasis;
use rwg::moments::{intensity_from_moments, intensity_weights, moment_trajectory, TriangleIndex};
use rwg::spectral::{
    expansion_table, growth_rates, intensity_moments_weighted, weak_dissipation_expansion,
    ExpansionTable, Regime,
};
use rwg::stochastic::{
    fk_mean_power, fk_second_moment, products_to_second, simulate_sde, McEstimate,
};

use crate::config::{ExperimentConfig, Needs};
use crate::error::CliError;
use crate::output::{num, OutputDir, Table};

const SECOND_INDEX: &str = "S_j_l in triangle order j <= l; S_jj = E[P_j^2], S_jl = 2 E[P_j P_l]";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Modes,
    Coupling,
    Moments,
    Spectrum,
    Expansions,
    Continuum,
    MonteCarlo,
    Scintillation,
}

impl Command {
    pub fn needs(self) -> &'static [Needs] {
        match self {
            Command::Modes => &[Needs::Waveguide],
            Command::Continuum => &[Needs::Continuum],
            Command::MonteCarlo => &[Needs::Coupling, Needs::MonteCarlo],
            _ => &[Needs::Coupling],
        }
    }

    pub fn run(self, cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
        match self {
            Command::Modes => modes(cfg, out),
            Command::Coupling => coupling(cfg, out),
            Command::Moments => moments(cfg, out),
            Command::Spectrum => spectrum(cfg, out),
            Command::Expansions => expansions(cfg, out),
            Command::Continuum => continuum(cfg, out),
            Command::MonteCarlo => montecarlo(cfg, out),
            Command::Scintillation => scintillation(cfg, out),
        }
    }
}

/// Coupling coefficients with the initial amplitudes and observation weights.
struct System {
    coupling: CouplingSet,
    amplitudes: Vec<f64>,
    weights: Vec<f64>,
}

impl System {
    fn n(&self) -> usize {
        self.coupling.len()
    }
}

fn basis(cfg: &ExperimentConfig) -> Result<ModeBasis, CliError> {
    let basis = ModeBasis::new(cfg.spec()?)?;
    if basis.is_empty() {
        return Err(CliError::Invalid {
            key: "waveguide".into(),
            reason: "the waveguide supports no guided modes".into(),
        });
    }
    Ok(basis)
}

fn system(cfg: &ExperimentConfig) -> Result<System, CliError> {
    if let Some(section) = &cfg.coupling {
        let coupling = section.to_set()?;
        let n = coupling.len();
        return Ok(System {
            coupling,
            amplitudes: section.amplitudes.clone(),
            weights: section.weights.clone().unwrap_or_else(|| vec![1.0; n]),
        });
    }
    let basis = basis(cfg)?;
    let coupling = CouplingSet::compute(&basis, &cfg.model()?, &cfg.coupling_options())?;
    coupling.validate_generator()?;
    Ok(System {
        coupling,
        amplitudes: basis.source_amplitudes(),
        weights: intensity_weights(&basis, cfg.run.x),
    })
}

fn modes(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let basis = ModeBasis::new(cfg.spec()?)?;
    let mut table = Table::new("rwg.modes/1", ["j", "parity", "sigma", "zeta", "beta", "A"])
        .meta("n_modes", basis.len());
    for m in &basis.modes {
        table.push(vec![
            m.j.to_string(),
            m.parity.tag().to_string(),
            num(m.sigma),
            num(m.zeta),
            num(m.beta),
            num(m.norm),
        ]);
    }
    out.csv("modes.csv", &table)?;
    out.json(
        "modes.json",
        &json!({
            "schema": "rwg.modes/1",
            "waveguide": basis.spec,
            "v_number": basis.spec.v_number(),
            "n_formula": basis.count.formula,
            "n_roots": basis.count.roots,
            "n_guided": basis.len(),
            "at_cutoff": basis.count.at_cutoff,
            "source_amplitudes": basis.source_amplitudes(),
            "modes": basis.modes,
        }),
    )
}

fn coupling(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let sys = system(cfg)?;
    out.json("coupling.json", &sys.coupling.to_document())
}

fn moments(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let sys = system(cfg)?;
    let n = sys.n();
    let index = TriangleIndex::new(n);
    let states = moment_trajectory(&sys.coupling, &sys.amplitudes, &cfg.run.z)?;

    let mut mean = Table::new(
        "rwg.mean/1",
        std::iter::once("z".to_string()).chain((0..n).map(|j| format!("P_{j}"))),
    )
    .meta("n_modes", n)
    .meta("index", "P_j = E[P_j], j = 0..n_modes-1");
    let mut second = Table::new(
        "rwg.second/1",
        std::iter::once("z".to_string()).chain(index.labels("S")),
    )
    .meta("n_modes", n)
    .meta("index", SECOND_INDEX);
    let mut intensity = Table::new("rwg.intensity/1", ["z", "m2", "m4", "ratio"])
        .meta("n_modes", n)
        .meta("x", num(cfg.run.x));
    for s in &states {
        mean.push(
            std::iter::once(num(s.z))
                .chain(s.q.iter().map(|&v| num(v)))
                .collect(),
        );
        second.push(
            std::iter::once(num(s.z))
                .chain(s.s.iter().map(|&v| num(v)))
                .collect(),
        );
        let (m2, m4) = intensity_from_moments(&sys.weights, &s.q, &s.s);
        intensity.push(vec![num(s.z), num(m2), num(m4), num(m4 / (m2 * m2))]);
    }
    out.csv("mean.csv", &mean)?;
    out.csv("second.csv", &second)?;
    out.csv("intensity.csv", &intensity)
}

/// Both expansion tables, or the reason a regime does not apply.
fn tables(
    cfg: &ExperimentConfig,
    coupling: &CouplingSet,
) -> Vec<(Regime, Result<ExpansionTable, rwg::Error>)> {
    [Regime::WeakDissipation, Regime::WeakCoupling]
        .into_iter()
        .map(|regime| {
            let table = expansion_table(regime, &coupling.lambda, &coupling.gamma, &cfg.run.thetas);
            if let Err(e) = &table {
                warn!("{regime:?} expansion skipped: {e}");
            }
            (regime, table)
        })
        .collect()
}

fn regime_name(regime: Regime) -> &'static str {
    match regime {
        Regime::WeakDissipation => "weak_dissipation",
        Regime::WeakCoupling => "weak_coupling",
    }
}

fn spectrum(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let sys = system(cfg)?;
    let spectral = growth_rates(&sys.coupling)?;
    let mut report = spectral.report();
    report.expansion_tables = tables(cfg, &sys.coupling)
        .into_iter()
        .filter_map(|(_, t)| t.ok())
        .collect();
    let mut doc = serde_json::to_value(&report)?;
    if let Value::Object(map) = &mut doc {
        map.insert("schema".into(), json!("rwg.spectrum/1"));
        map.insert("n_modes".into(), json!(sys.n()));
        map.insert("W_index".into(), json!("triangle order j <= l"));
    }
    out.json("spectrum.json", &doc)
}

fn expansions(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let sys = system(cfg)?;
    let mut summary = serde_json::Map::new();
    summary.insert("schema".into(), json!("rwg.expansions/1"));
    for (regime, table) in tables(cfg, &sys.coupling) {
        let name = regime_name(regime);
        match table {
            Ok(t) => {
                let mut csv = Table::new(
                    "rwg.expansion/1",
                    [
                        "theta",
                        "lambda_exact",
                        "lambda_pred",
                        "mu_exact",
                        "mu_pred",
                        "gap_exact",
                        "gap_pred",
                    ],
                )
                .meta("regime", name)
                .meta("n_modes", sys.n());
                for r in &t.rows {
                    csv.push(
                        [
                            r.theta,
                            r.lambda_exact,
                            r.lambda_pred,
                            r.mu_exact,
                            r.mu_pred,
                            r.gap_exact,
                            r.gap_pred,
                        ]
                        .into_iter()
                        .map(num)
                        .collect(),
                    );
                }
                out.csv(&format!("expansions_{name}.csv"), &csv)?;
                summary.insert(name.into(), serde_json::to_value(&t)?);
            }
            Err(e) => {
                summary.insert(name.into(), json!({ "skipped": e.to_string() }));
            }
        }
    }
    out.json("expansions.json", &Value::Object(summary))
}

fn gamma_profile(cfg: &ExperimentConfig) -> Result<GammaProfile, CliError> {
    if let Some(g) = cfg.run.gamma {
        return Ok(g);
    }
    let spec = cfg.spec()?;
    Ok(match cfg.model()? {
        CovarianceModel::TypeI {
            transverse,
            longitudinal,
        } => GammaProfile::TypeI {
            n: spec.n,
            d: spec.d,
            transverse,
            longitudinal,
            spacing: Spacing::default(),
        },
        CovarianceModel::TypeII { kernel } => GammaProfile::TypeII {
            n: spec.n,
            d: spec.d,
            kernel,
            spacing: Spacing::default(),
        },
    })
}

fn continuum(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let profile = gamma_profile(cfg)?;
    let gamma = GammaInfinity::new(profile)?;
    let numerics = &cfg.numerics;

    let mut grid = Table::new(
        "rwg.continuum_grid/1",
        [
            "m",
            "lambda",
            "lambda_fine",
            "lambda_extrapolated",
            "separation",
        ],
    );
    for &m in &numerics.grid_sizes {
        let s = h1_eigenproblem(&gamma, m)?;
        grid.push(vec![
            m.to_string(),
            num(s.lambda),
            num(s.lambda_fine),
            num(s.lambda_extrapolated),
            num(s.separation),
        ]);
    }
    out.csv("continuum_grid.csv", &grid)?;

    let main = h1_eigenproblem(&gamma, numerics.continuum_m)?;
    let mut eigen = Table::new("rwg.eigenfunction/1", ["u", "phi"]).meta("m", main.m);
    for (u, phi) in main.u.iter().zip(&main.phi) {
        eigen.push(vec![num(*u), num(*phi)]);
    }
    out.csv("eigenfunction.csv", &eigen)?;

    let h2_m = numerics
        .grid_sizes
        .iter()
        .copied()
        .min()
        .unwrap_or(numerics.continuum_m);
    let h2 = h2_eigenproblem(&gamma, h2_m)?;

    let family = match cfg.run.gamma {
        Some(gamma) => FiniteNFamily::Profile {
            gamma,
            absorption: cfg.run.absorption,
        },
        None => {
            let spec = cfg.spec()?;
            FiniteNFamily::Waveguide {
                n: spec.n,
                d: spec.d,
                perturbation: cfg.model()?,
                numerics: cfg.coupling_options(),
            }
        }
    };
    let convergence = if numerics.finite_n.is_empty() {
        None
    } else {
        let table = finite_n_convergence(&family, &numerics.finite_n, numerics.continuum_m)?;
        let mut csv = Table::new(
            "rwg.finite_n/1",
            [
                "n",
                "lambda",
                "mu",
                "gap",
                "relative_gap",
                "scaled_lambda",
                "mean_profile_error",
                "second_profile_error",
            ],
        );
        for r in &table.rows {
            csv.push(vec![
                r.n.to_string(),
                num(r.lambda),
                num(r.mu),
                num(r.gap),
                num(r.relative_gap),
                num(r.scaled_lambda),
                num(r.mean_profile_error),
                num(r.second_profile_error),
            ]);
        }
        out.csv("finite_n.csv", &csv)?;
        Some(table)
    };

    let variational = if cfg.run.trials.is_empty() {
        Vec::new()
    } else {
        variational_lambda(&gamma, &cfg.run.trials)?
    };
    out.json(
        "continuum.json",
        &json!({
            "schema": "rwg.continuum/1",
            "gamma": profile,
            "m": main.m,
            "lambda_cont": main.lambda,
            "lambda_extrapolated": main.lambda_extrapolated,
            "separation": main.separation,
            "h2": {
                "m": h2.m,
                "lambda": h2.lambda,
                "mu_tensor": h2.mu_tensor,
                "mu_square": h2.mu_square,
                "mu_triangle": h2.mu_triangle,
                "product_residual": h2.product_residual,
            },
            "finite_n": convergence,
            "variational": cfg.run.trials.iter().zip(&variational).map(|(t, v)| json!({"trial": t, "lambda": v})).collect::<Vec<_>>(),
        }),
    )
}

#[derive(Default)]
struct ZTally {
    scored: usize,
    within: usize,
}

impl ZTally {
    fn add(&mut self, stderr: f64, z: f64) {
        if stderr > 0.0 {
            self.scored += 1;
            if z.abs() < 3.0 {
                self.within += 1;
            }
        }
    }

    fn summary(&self) -> Value {
        let fraction = if self.scored == 0 {
            1.0
        } else {
            self.within as f64 / self.scored as f64
        };
        json!({ "scored": self.scored, "within_3": self.within, "fraction_within_3": fraction })
    }
}

struct McRows<'a> {
    table: &'a mut Table,
    tally: &'a mut ZTally,
}

impl McRows<'_> {
    fn push(
        &mut self,
        method: &str,
        z: f64,
        quantity: &str,
        labels: &[String],
        est: &McEstimate,
        truth: &[f64],
    ) {
        for ((label, z_score), ((mean, stderr), ode)) in labels
            .iter()
            .zip(est.z_scores(truth))
            .zip(est.mean.iter().zip(&est.stderr).zip(truth))
        {
            self.tally.add(*stderr, z_score);
            self.table.push(vec![
                method.to_string(),
                num(z),
                quantity.to_string(),
                label.clone(),
                num(*mean),
                num(*stderr),
                num(*ode),
                num(z_score),
            ]);
        }
    }
}

fn montecarlo(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let sys = system(cfg)?;
    let n = sys.n();
    let mc = cfg.mc_config();
    let zs = &cfg.run.z;
    let truth = moment_trajectory(&sys.coupling, &sys.amplitudes, zs)?;
    let mean_labels: Vec<String> = (0..n).map(|j| format!("P_{j}")).collect();
    let second_labels = TriangleIndex::new(n).labels("S");

    let mut table = Table::new(
        "rwg.montecarlo/1",
        [
            "method", "z", "quantity", "label", "estimate", "stderr", "ode", "z_score",
        ],
    )
    .meta("n_modes", n)
    .meta("index", SECOND_INDEX)
    .meta("seed", mc.seed)
    .meta("paths", mc.paths);
    let mut fk_tally = ZTally::default();
    let mut sde_tally = ZTally::default();

    for (z, state) in zs.iter().zip(&truth) {
        let mean = fk_mean_power(&sys.coupling, &sys.amplitudes, *z, &mc)?;
        let second = fk_second_moment(&sys.coupling, &sys.amplitudes, *z, &mc)?;
        let mut rows = McRows {
            table: &mut table,
            tally: &mut fk_tally,
        };
        rows.push("fk", *z, "mean", &mean_labels, &mean, &state.q);
        rows.push("fk", *z, "second", &second_labels, &second, &state.s);
    }

    let sde = simulate_sde(&sys.coupling, &sys.amplitudes, &mc, zs)?;
    let mut total_power = Vec::new();
    for (cp, state) in sde.checkpoints.iter().zip(&truth) {
        let second = McEstimate {
            mean: products_to_second(&cp.power_products.mean, n),
            stderr: products_to_second(&cp.power_products.stderr, n),
            paths_used: cp.power_products.paths_used,
        };
        let mut rows = McRows {
            table: &mut table,
            tally: &mut sde_tally,
        };
        rows.push("sde", cp.z, "mean", &mean_labels, &cp.mean_power, &state.q);
        rows.push("sde", cp.z, "second", &second_labels, &second, &state.s);
        total_power.push(json!({
            "z": cp.z,
            "mean": cp.total_power.mean[0],
            "stderr": cp.total_power.stderr[0],
            "ode": state.q.iter().sum::<f64>(),
        }));
    }
    out.csv("montecarlo.csv", &table)?;

    if !sde.samples.is_empty() {
        let mut samples = Table::new("rwg.samples/1", ["path", "z", "mode", "re", "im"])
            .meta("n_modes", n)
            .meta("dz", num(mc.dz));
        for path in &sde.samples {
            for (cp, amps) in sde.checkpoints.iter().zip(&path.amplitudes) {
                for (j, (re, im)) in amps.iter().enumerate() {
                    samples.push(vec![
                        path.path.to_string(),
                        num(cp.z),
                        j.to_string(),
                        num(*re),
                        num(*im),
                    ]);
                }
            }
        }
        out.csv("samples.csv", &samples)?;
    }

    let overall = ZTally {
        scored: fk_tally.scored + sde_tally.scored,
        within: fk_tally.within + sde_tally.within,
    };
    out.json(
        "montecarlo.json",
        &json!({
            "schema": "rwg.montecarlo/1",
            "seed": mc.seed,
            "paths": mc.paths,
            "dz": mc.dz,
            "renormalize": mc.renormalize,
            "n_modes": n,
            "estimates": table.len(),
            "fk": fk_tally.summary(),
            "sde": sde_tally.summary(),
            "overall": overall.summary(),
            "sde_total_power": total_power,
        }),
    )
}

/// Least-squares slope of `ys` against `xs`.
fn slope(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn scintillation(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<(), CliError> {
    let sys = system(cfg)?;
    let spectral = growth_rates(&sys.coupling)?;
    let exponent = -spectral.gap;
    let zs = &cfg.run.z;
    let exact = moment_trajectory(&sys.coupling, &sys.amplitudes, zs)?;

    let mut table = Table::new(
        "rwg.scintillation/1",
        ["z", "m2", "m4", "ratio", "ratio_ode", "exponent"],
    )
    .meta("n_modes", sys.n())
    .meta("x", num(cfg.run.x));
    let mut log_ratio = Vec::new();
    for (&z, state) in zs.iter().zip(&exact) {
        let (m2, m4) = intensity_moments_weighted(&sys.weights, &spectral, &sys.amplitudes, z);
        let (e2, e4) = intensity_from_moments(&sys.weights, &state.q, &state.s);
        let ratio_ode = e4 / (e2 * e2);
        log_ratio.push((z, ratio_ode.ln()));
        table.push(vec![
            num(z),
            num(m2),
            num(m4),
            num(m4 / (m2 * m2)),
            num(ratio_ode),
            num(exponent),
        ]);
    }
    out.csv("scintillation.csv", &table)?;

    let tail = &log_ratio[log_ratio.len() / 2..];
    let (xs, ys): (Vec<f64>, Vec<f64>) =
        tail.iter().copied().filter(|(_, y)| y.is_finite()).unzip();
    let predicted = match weak_dissipation_expansion(&sys.coupling.gamma, &sys.coupling.lambda) {
        Ok(exp) => Some(-exp.coefficients.predict_gap(1.0)),
        Err(e) => {
            warn!("weak-dissipation prediction unavailable: {e}");
            None
        }
    };
    out.json(
        "scintillation.json",
        &json!({
            "schema": "rwg.scintillation/1",
            "n_modes": sys.n(),
            "lambda": spectral.lambda,
            "mu": spectral.mu,
            "exponent": exponent,
            "predicted_exponent": predicted,
            "fitted_exponent": slope(&xs, &ys),
            "max_dissipation": sys.coupling.lambda.max(),
        }),
    )
}
