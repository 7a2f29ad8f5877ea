use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use rwg::continuum::{GammaProfile, TrialFunction, MIN_GRID};
use rwg::coupling::{CouplingOptions, CouplingSet, CovarianceModel, TransverseKernel};
use rwg::kernel::{CovarianceKernel1D, KernelFamily};
use rwg::mode_solver::WaveguideSpec;
use rwg::stochastic::McConfig;

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub waveguide: Option<WaveguideSection>,
    pub perturbation: Option<PerturbationSection>,
    /// Explicit rates instead of a computed waveguide coupling.
    pub coupling: Option<CouplingSection>,
    #[serde(default)]
    pub numerics: NumericsSection,
    #[serde(default)]
    pub mc: McSection,
    #[serde(default)]
    pub run: RunSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WaveguideSection {
    pub n: f64,
    pub d: f64,
    pub k: f64,
    #[serde(default)]
    pub x_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PerturbationType {
    #[serde(rename = "type1")]
    Interior,
    #[serde(rename = "type2")]
    Boundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerturbationSection {
    #[serde(rename = "type")]
    pub kind: PerturbationType,
    pub family: KernelFamily,
    pub variance: f64,
    pub corr_length: f64,
    /// Transverse shape, type1 only.
    pub transverse: Option<TransverseKernel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CouplingSection {
    /// Symmetric off-diagonal exchange rates; the diagonal is ignored.
    pub rates: Vec<Vec<f64>>,
    pub lambda: Vec<f64>,
    pub amplitudes: Vec<f64>,
    /// Intensity weights for the observation point; all ones by default.
    pub weights: Option<Vec<f64>>,
    pub gamma1: Option<Vec<Vec<f64>>>,
    pub gamma_s: Option<Vec<Vec<f64>>>,
    pub lambda_s: Option<Vec<f64>>,
    pub kappa: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NumericsSection {
    pub transverse_order: usize,
    pub radiative_panels: usize,
    pub rel_tol: f64,
    /// Continuum grid sizes `M`.
    pub grid_sizes: Vec<usize>,
    /// Mode counts for the finite-N convergence table.
    pub finite_n: Vec<usize>,
    /// Grid used for the continuum eigenfunction in the convergence table.
    pub continuum_m: usize,
}

impl Default for NumericsSection {
    fn default() -> Self {
        let opts = CouplingOptions::default();
        Self {
            transverse_order: opts.transverse_order,
            radiative_panels: opts.radiative_panels,
            rel_tol: opts.rel_tol,
            grid_sizes: vec![64, 128, 256],
            finite_n: vec![8, 16, 32, 64],
            continuum_m: 256,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McSection {
    pub paths: usize,
    pub seed: u64,
    pub dz: f64,
    pub z_max: f64,
    /// Raw SDE sample paths written to `samples.csv`.
    pub keep_paths: usize,
    pub renormalize: bool,
}

impl Default for McSection {
    fn default() -> Self {
        Self {
            paths: 10_000,
            seed: 1,
            dz: 1e-3,
            z_max: 1.0,
            keep_paths: 0,
            renormalize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    /// Propagation distances at which outputs are reported.
    pub z: Vec<f64>,
    /// Observation point for intensity statistics.
    pub x: f64,
    pub thetas: Vec<f64>,
    /// Continuum profile; derived from the waveguide when absent.
    pub gamma: Option<GammaProfile>,
    /// Absorption at the last mode for profile families.
    pub absorption: f64,
    pub trials: Vec<TrialFunction>,
    pub output: Option<String>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            z: vec![0.0, 0.25, 0.5, 1.0],
            x: 0.0,
            thetas: vec![1e-2, 5e-3, 2.5e-3],
            gamma: None,
            absorption: 1.0,
            trials: Vec::new(),
            output: None,
        }
    }
}

fn bad(key: &str, reason: impl Into<String>) -> CliError {
    CliError::Invalid {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn core_invalid(e: rwg::Error) -> CliError {
    match e {
        rwg::Error::InvalidParameter { key, reason } => CliError::Invalid { key, reason },
        other => CliError::Invalid {
            key: "config".into(),
            reason: other.to_string(),
        },
    }
}

/// Reads a config file and applies `section.key=value` overrides.
pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
        path: path.display().to_string(),
        source: e,
    })?;
    let parse_error = |e: toml::de::Error| CliError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    };
    if overrides.is_empty() {
        return toml::from_str(&text).map_err(parse_error);
    }
    let mut table: toml::Table = toml::from_str(&text).map_err(parse_error)?;
    for (key, raw) in overrides {
        apply_override(&mut table, key, raw)?;
    }
    ExperimentConfig::deserialize(toml::Value::Table(table)).map_err(|e| CliError::Parse {
        path: path.display().to_string(),
        message: format!("after overrides: {e}"),
    })
}

fn apply_override(table: &mut toml::Table, key: &str, raw: &str) -> Result<(), CliError> {
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| bad(key, "empty override key"))?;
    let mut node = table;
    for part in parts {
        let entry = node
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| bad(key, format!("`{part}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

/// What a command needs from the config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Needs {
    Waveguide,
    Coupling,
    Continuum,
    MonteCarlo,
}

impl ExperimentConfig {
    pub fn validate(&self, needs: &[Needs]) -> Result<(), CliError> {
        if let Some(w) = &self.waveguide {
            self.spec_of(w)?;
        }
        if let Some(p) = &self.perturbation {
            self.model_of(p)?;
        }
        if let Some(c) = &self.coupling {
            if self.waveguide.is_some() || self.perturbation.is_some() {
                return Err(bad(
                    "coupling",
                    "cannot be combined with [waveguide] or [perturbation]",
                ));
            }
            c.to_set()?;
        }
        self.validate_numerics()?;
        self.validate_run()?;
        for need in needs {
            match need {
                Needs::Waveguide => {
                    if self.waveguide.is_none() {
                        return Err(bad("waveguide", "section is required"));
                    }
                }
                Needs::Coupling => {
                    if self.coupling.is_none() {
                        self.require_physical()?;
                    }
                }
                Needs::Continuum => {
                    if self.run.gamma.is_none() {
                        self.require_physical()?;
                    }
                }
                Needs::MonteCarlo => {
                    self.mc_config().validate().map_err(core_invalid)?;
                    if self.mc.z_max > 0.0 && self.mc.dz > self.mc.z_max {
                        return Err(bad("mc.dz", "must not exceed mc.z_max"));
                    }
                    if let Some(z) = self.run.z.iter().find(|&&z| z > self.mc.z_max) {
                        return Err(bad(
                            "run.z",
                            format!("{z} exceeds mc.z_max = {}", self.mc.z_max),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn require_physical(&self) -> Result<(), CliError> {
        if self.waveguide.is_none() {
            return Err(bad(
                "waveguide",
                "section is required (or provide [coupling])",
            ));
        }
        if self.perturbation.is_none() {
            return Err(bad(
                "perturbation",
                "section is required (or provide [coupling])",
            ));
        }
        Ok(())
    }

    fn validate_numerics(&self) -> Result<(), CliError> {
        let n = &self.numerics;
        if !(4..=512).contains(&n.transverse_order) {
            return Err(bad(
                "numerics.transverse_order",
                format!("must be in [4, 512], got {}", n.transverse_order),
            ));
        }
        if !(1..=4096).contains(&n.radiative_panels) {
            return Err(bad(
                "numerics.radiative_panels",
                format!("must be in [1, 4096], got {}", n.radiative_panels),
            ));
        }
        if !(n.rel_tol > 0.0 && n.rel_tol <= 1e-2) {
            return Err(bad(
                "numerics.rel_tol",
                format!("must be in (0, 1e-2], got {}", n.rel_tol),
            ));
        }
        if let Some(m) = n
            .grid_sizes
            .iter()
            .chain([&n.continuum_m])
            .find(|&&m| !(MIN_GRID..=1024).contains(&m))
        {
            return Err(bad(
                "numerics.grid_sizes",
                format!("grid sizes must be in [{MIN_GRID}, 1024], got {m}"),
            ));
        }
        if let Some(m) = n.finite_n.iter().find(|&&m| !(2..=400).contains(&m)) {
            return Err(bad(
                "numerics.finite_n",
                format!("mode counts must be in [2, 400], got {m}"),
            ));
        }
        Ok(())
    }

    fn validate_run(&self) -> Result<(), CliError> {
        let r = &self.run;
        if r.z.is_empty() {
            return Err(bad("run.z", "must not be empty"));
        }
        if let Some(z) = r.z.iter().find(|z| !(z.is_finite() && **z >= 0.0)) {
            return Err(bad(
                "run.z",
                format!("distances must be finite and >= 0, got {z}"),
            ));
        }
        if !r.x.is_finite() {
            return Err(bad("run.x", "must be finite"));
        }
        if let Some(t) = r.thetas.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
            return Err(bad("run.thetas", format!("must be > 0, got {t}")));
        }
        if !(r.absorption.is_finite() && r.absorption >= 0.0) {
            return Err(bad(
                "run.absorption",
                format!("must be >= 0, got {}", r.absorption),
            ));
        }
        if let Some(g) = &r.gamma {
            rwg::continuum::GammaInfinity::new(*g).map_err(|e| match e {
                rwg::Error::InvalidParameter { key, reason } => {
                    match key.strip_prefix("continuum.gamma") {
                        Some(rest) => bad(&format!("run.gamma{rest}"), reason),
                        None => bad("run.gamma", format!("{key}: {reason}")),
                    }
                }
                other => bad("run.gamma", other.to_string()),
            })?;
        }
        Ok(())
    }

    fn spec_of(&self, w: &WaveguideSection) -> Result<WaveguideSpec, CliError> {
        let spec = WaveguideSpec {
            n: w.n,
            d: w.d,
            k: w.k,
            x_s: w.x_s,
        };
        spec.validate().map_err(core_invalid)?;
        Ok(spec)
    }

    pub fn spec(&self) -> Result<WaveguideSpec, CliError> {
        let w = self
            .waveguide
            .as_ref()
            .ok_or_else(|| bad("waveguide", "section is required"))?;
        self.spec_of(w)
    }

    fn model_of(&self, p: &PerturbationSection) -> Result<CovarianceModel, CliError> {
        let kernel = CovarianceKernel1D {
            family: p.family,
            variance: p.variance,
            corr_length: p.corr_length,
        };
        let model = match p.kind {
            PerturbationType::Boundary => {
                if p.transverse.is_some() {
                    return Err(bad(
                        "perturbation.transverse",
                        "only used by type1 perturbations",
                    ));
                }
                CovarianceModel::TypeII { kernel }
            }
            PerturbationType::Interior => CovarianceModel::TypeI {
                transverse: p
                    .transverse
                    .ok_or_else(|| bad("perturbation.transverse", "required for type1"))?,
                longitudinal: kernel,
            },
        };
        model.validate().map_err(core_invalid)?;
        Ok(model)
    }

    pub fn model(&self) -> Result<CovarianceModel, CliError> {
        let p = self
            .perturbation
            .as_ref()
            .ok_or_else(|| bad("perturbation", "section is required"))?;
        self.model_of(p)
    }

    pub fn coupling_options(&self) -> CouplingOptions {
        CouplingOptions {
            transverse_order: self.numerics.transverse_order,
            radiative_panels: self.numerics.radiative_panels,
            rel_tol: self.numerics.rel_tol,
        }
    }

    pub fn mc_config(&self) -> McConfig {
        McConfig {
            paths: self.mc.paths,
            seed: self.mc.seed,
            dz: self.mc.dz,
            z_max: self.mc.z_max,
            keep_paths: self.mc.keep_paths,
            renormalize: self.mc.renormalize,
        }
    }
}

fn square(rows: &[Vec<f64>], n: usize, key: &str) -> Result<DMatrix<f64>, CliError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(bad(key, format!("must be a {n}x{n} matrix")));
    }
    let m = DMatrix::from_fn(n, n, |r, c| rows[r][c]);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(bad(key, "entries must be finite"));
    }
    Ok(m)
}

fn vector(v: &[f64], n: usize, key: &str) -> Result<DVector<f64>, CliError> {
    if v.len() != n {
        return Err(bad(key, format!("must have length {n}, got {}", v.len())));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(bad(key, "entries must be finite"));
    }
    Ok(DVector::from_column_slice(v))
}

impl CouplingSection {
    pub fn n_modes(&self) -> usize {
        self.lambda.len()
    }

    pub fn to_set(&self) -> Result<CouplingSet, CliError> {
        let n = self.n_modes();
        if n == 0 {
            return Err(bad("coupling.lambda", "must not be empty"));
        }
        let mut rates = square(&self.rates, n, "coupling.rates")?;
        rates.fill_diagonal(0.0);
        if rates.iter().any(|&r| r < 0.0) {
            return Err(bad("coupling.rates", "rates must be >= 0"));
        }
        if (&rates - rates.transpose()).amax() > 0.0 {
            return Err(bad("coupling.rates", "must be symmetric"));
        }
        let lambda = vector(&self.lambda, n, "coupling.lambda")?;
        if lambda.iter().any(|&l| l < 0.0) {
            return Err(bad("coupling.lambda", "must be >= 0"));
        }
        vector(&self.amplitudes, n, "coupling.amplitudes")?;
        if let Some(w) = &self.weights {
            vector(w, n, "coupling.weights")?;
        }
        let mut set = CouplingSet::from_rates(CouplingSet::generator_from_rates(&rates), lambda)
            .map_err(core_invalid)?;
        if let Some(g) = &self.gamma1 {
            set.gamma1 = square(g, n, "coupling.gamma1")?;
        }
        if let Some(g) = &self.gamma_s {
            set.gamma_s = square(g, n, "coupling.gamma_s")?;
        }
        if let Some(v) = &self.lambda_s {
            set.lambda_s = vector(v, n, "coupling.lambda_s")?;
        }
        if let Some(v) = &self.kappa {
            set.kappa = vector(v, n, "coupling.kappa")?;
        }
        Ok(set)
    }
}
