//! JSON experiment configuration: schema, defaults and validation.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use oscillab::integrands::{IntegrandF, NonlocalW, PiecewisePolynomial, PolyPiece, TrigWeight, LOCAL_CATALOG, NONLOCAL_CATALOG};
use oscillab::lattice::GridSpec;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    Cellhom,
    Convexify,
    YmCheck,
    Oscillate,
    Gamma,
    SingleGamma,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Cellhom => "cellhom",
            Command::Convexify => "convexify",
            Command::YmCheck => "ym-check",
            Command::Oscillate => "oscillate",
            Command::Gamma => "gamma",
            Command::SingleGamma => "single-gamma",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub dim_macro: usize,
    pub dim_state: usize,
    pub n_x: usize,
    pub n_y: usize,
    /// Defaults to the origin.
    pub omega_lo: Option<Vec<f64>>,
    /// Defaults to the all-ones corner.
    pub omega_hi: Option<Vec<f64>>,
    pub p: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            dim_macro: 1,
            dim_state: 1,
            n_x: 512,
            n_y: 64,
            omega_lo: None,
            omega_hi: None,
            p: 2.0,
        }
    }
}

impl GridConfig {
    pub fn spec(&self) -> Result<GridSpec, CliError> {
        let lo = self.omega_lo.clone().unwrap_or_else(|| vec![0.0; self.dim_macro]);
        let hi = self.omega_hi.clone().unwrap_or_else(|| vec![1.0; self.dim_macro]);
        Ok(GridSpec::new(self.dim_macro, self.dim_state, self.n_x, self.n_y, lo, hi, self.p)?)
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PieceConfig {
    pub lo: f64,
    pub hi: f64,
    /// Increasing degree.
    pub coeffs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct WeightConfig {
    pub mean: f64,
    #[serde(default)]
    pub sin: Vec<f64>,
    #[serde(default)]
    pub cos: Vec<f64>,
}

/// `f(y, ξ) = a(y) P(ξ)` with `P` piecewise polynomial and `a` a trigonometric weight.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InlineIntegrand {
    #[serde(default)]
    pub label: Option<String>,
    pub pieces: Vec<PieceConfig>,
    #[serde(default)]
    pub weight: Option<WeightConfig>,
    pub c: f64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default)]
    pub window: Option<(f64, f64)>,
}

fn default_p() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum IntegrandConfig {
    Catalog(String),
    Inline(InlineIntegrand),
}

impl IntegrandConfig {
    pub fn build(&self) -> Result<IntegrandF, CliError> {
        match self {
            IntegrandConfig::Catalog(name) => IntegrandF::catalog(name).map_err(|_| {
                CliError::Invalid(format!(
                    "unknown integrand '{name}'; catalog: {}",
                    LOCAL_CATALOG.join(", ")
                ))
            }),
            IntegrandConfig::Inline(spec) => {
                let pieces = spec
                    .pieces
                    .iter()
                    .map(|p| PolyPiece {
                        lo: p.lo,
                        hi: p.hi,
                        coeffs: p.coeffs.clone(),
                    })
                    .collect();
                let poly = PiecewisePolynomial::new(pieces)?;
                let weight = spec.weight.as_ref().map(|w| TrigWeight {
                    mean: w.mean,
                    sin: w.sin.clone(),
                    cos: w.cos.clone(),
                });
                let label = spec.label.clone().unwrap_or_else(|| "inline".into());
                let mut f = IntegrandF::from_piecewise(label, poly, weight, spec.c, spec.p);
                if let Some((lo, hi)) = spec.window {
                    if !(lo < hi) {
                        return Err(CliError::Invalid("integrand window needs lo < hi".into()));
                    }
                    f = f.with_window(lo, hi);
                }
                Ok(f)
            }
        }
    }
}

/// `W = f(y, ξ) + f(y', ξ') + coupling ξ·ξ'`.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct InlineW {
    pub local: IntegrandConfig,
    #[serde(default)]
    pub coupling: f64,
    pub a: f64,
    pub alpha: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(untagged)]
pub enum WConfig {
    Catalog(String),
    Inline(InlineW),
}

impl WConfig {
    pub fn build(&self) -> Result<NonlocalW, CliError> {
        match self {
            WConfig::Catalog(name) => NonlocalW::catalog(name).map_err(|_| {
                CliError::Invalid(format!(
                    "unknown non-local density '{name}'; catalog: {}",
                    NONLOCAL_CATALOG.join(", ")
                ))
            }),
            WConfig::Inline(spec) => Ok(NonlocalW::from_local(spec.local.build()?, spec.coupling, spec.a, spec.alpha, spec.c)),
        }
    }
}

pub const PHI_CATALOG: &[&str] = &["sin", "sin_cos", "square"];

/// Periodic profile with its period (in unit cells).
pub type Profile = (Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>, usize);

/// Built-in scalar oscillation profiles, functions of the first coordinate.
pub fn phi_catalog(name: &str) -> Result<Profile, CliError> {
    let out: Profile = match name {
        "sin" => (Arc::new(|y: &[f64]| vec![(2.0 * PI * y[0]).sin()]), 1),
        "sin_cos" => (Arc::new(|y: &[f64]| vec![(PI * y[0]).sin() + 0.5 * (2.0 * PI * y[0]).cos()]), 2),
        "square" => (
            Arc::new(|y: &[f64]| {
                let t = y[0] - y[0].floor();
                vec![if t < 0.5 { 1.0 } else { -1.0 }]
            }),
            1,
        ),
        _ => {
            return Err(CliError::Invalid(format!(
                "unknown profile '{name}'; catalog: {}",
                PHI_CATALOG.join(", ")
            )))
        }
    };
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SequenceConfig {
    /// `u_n(x) = F + φ(x / ε_n)`.
    PeriodicShift {
        #[serde(default = "default_phi")]
        phi: String,
        #[serde(default)]
        offset: Option<Vec<f64>>,
    },
    /// Tiles filled with `s ↦ s₀ φ(s / ε')` on the unit cube, `fill` elsewhere.
    AveragingTiles {
        #[serde(default = "default_phi")]
        phi: String,
        #[serde(default)]
        fill: Option<Vec<f64>>,
        /// Macro resolution of the inner measure before averaging.
        #[serde(default = "default_inner_cells")]
        inner_cells: usize,
    },
}

fn default_phi() -> String {
    "sin".into()
}

fn default_inner_cells() -> usize {
    64
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig::PeriodicShift {
            phi: default_phi(),
            offset: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct Tolerances {
    /// Plateau test of the T-schedule.
    pub cell_rel_tol: f64,
    /// `|f_hom − (co f)_hom| ≤ identity_tol (1 + |value|)`.
    pub identity_tol: f64,
    /// Jensen gap tolerance of the characterization check.
    pub gap_rel_tol: f64,
    /// Slack of the monotonicity checks, relative to `1 + |value|`.
    pub monotone_tol: f64,
    /// Minimal log-log convergence rate of the pairings.
    pub rate_min: f64,
    /// Largest pairing error at the finest ε for tiled sequences.
    pub pairing_gap: f64,
    /// Largest product-structure gap at the finest ε.
    pub product_gap: f64,
    /// Relative gap between the minima at the finest ε.
    pub final_gap: f64,
    /// Absolute floor added to relative gap tolerances.
    pub abs_floor: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            cell_rel_tol: 1e-2,
            identity_tol: 5e-2,
            gap_rel_tol: 1e-2,
            monotone_tol: 1e-9,
            rate_min: 0.8,
            pairing_gap: 5e-2,
            product_gap: 5e-3,
            final_gap: 2e-2,
            abs_floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Required by `oscillab run`; must match the subcommand otherwise.
    pub command: Option<Command>,
    pub grid: GridConfig,
    pub integrand: Option<IntegrandConfig>,
    #[serde(rename = "W")]
    pub w: Option<WConfig>,
    /// One state value.
    pub xi: Option<Vec<f64>>,
    /// Several state values.
    pub xi_list: Option<Vec<Vec<f64>>>,
    pub t_schedule: Vec<usize>,
    /// Subcells per unit cell; defaults to `grid.n_y`.
    pub subcells: Option<usize>,
    pub eps_schedule: Option<Vec<f64>>,
    pub k_atoms: usize,
    pub k_list: Option<Vec<usize>>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub tolerances: Tolerances,
    /// Measure CSV for `ym-check`.
    pub measure: Option<PathBuf>,
    /// Catalog names of the characterization battery.
    pub battery: Option<Vec<String>>,
    /// Constant deformation the measure must have (`ym-check`).
    pub expected_deformation: Option<Vec<f64>>,
    pub sequence: SequenceConfig,
    /// Constant deformation constraint for `gamma`; absent means free.
    pub deformation: Option<Vec<f64>>,
    pub envelope_intervals: usize,
    /// Write two-column plot-data files next to the reports.
    pub plots: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            command: None,
            grid: GridConfig::default(),
            integrand: None,
            w: None,
            xi: None,
            xi_list: None,
            t_schedule: vec![1, 2, 4, 8],
            subcells: None,
            eps_schedule: None,
            k_atoms: 4,
            k_list: None,
            seeds: (1..=8).collect(),
            output_dir: PathBuf::from("oscillab-out"),
            tolerances: Tolerances::default(),
            measure: None,
            battery: None,
            expected_deformation: None,
            sequence: SequenceConfig::default(),
            deformation: None,
            envelope_intervals: 800,
            plots: true,
        }
    }
}

fn context_line(text: &str, line: usize) -> String {
    text.lines().nth(line.saturating_sub(1)).unwrap_or("").trim_end().to_string()
}

/// Parses a configuration; relative paths in it resolve against the file's directory.
pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut config = parse_config(&text, path)?;
    if let Some(base) = path.parent() {
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        if let Some(m) = &config.measure {
            if m.is_relative() {
                config.measure = Some(base.join(m));
            }
        }
    }
    config.validate()?;
    Ok(config)
}

/// Parses without validating; `origin` only labels diagnostics.
pub fn parse_config(text: &str, origin: &Path) -> Result<ExperimentConfig, CliError> {
    serde_json::from_str(text).map_err(|e| CliError::Config {
        path: origin.to_path_buf(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
        context: context_line(text, e.line()),
    })
}

impl ExperimentConfig {
    /// Checks the invariants and makes sure `output_dir` is writable.
    pub fn validate(&self) -> Result<(), CliError> {
        self.grid.spec()?;
        if self.t_schedule.is_empty() || self.t_schedule.contains(&0) {
            return Err(CliError::Invalid("t_schedule entries must be positive".into()));
        }
        if self.subcells == Some(0) {
            return Err(CliError::Invalid("subcells must be positive".into()));
        }
        if let Some(eps) = &self.eps_schedule {
            if eps.is_empty() {
                return Err(CliError::Invalid("eps_schedule is empty".into()));
            }
            if let Some(e) = eps.iter().find(|e| !(e.is_finite() && **e > 0.0)) {
                return Err(CliError::Invalid(format!("eps_schedule entries must be positive, got {e}")));
            }
        }
        if self.k_atoms == 0 {
            return Err(CliError::Invalid("k_atoms must be positive".into()));
        }
        if let Some(ks) = &self.k_list {
            if ks.is_empty() || ks.contains(&0) {
                return Err(CliError::Invalid("k_list entries must be positive".into()));
            }
        }
        if self.seeds.is_empty() {
            return Err(CliError::Invalid("seeds must not be empty".into()));
        }
        if self.envelope_intervals < 2 {
            return Err(CliError::Invalid("envelope_intervals must be at least 2".into()));
        }
        let d = self.grid.dim_state;
        for xi in self.xi.iter().chain(self.xi_list.iter().flatten()) {
            if xi.len() != d || xi.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Invalid(format!("state value {xi:?} must have {d} finite components")));
            }
        }
        for v in [&self.deformation, &self.expected_deformation].into_iter().flatten() {
            if v.len() != d {
                return Err(CliError::Invalid(format!("deformation {v:?} must have {d} components")));
            }
        }
        if let Some(f) = &self.integrand {
            f.build()?;
        }
        if let Some(w) = &self.w {
            w.build()?;
        }
        if let Some(names) = &self.battery {
            for n in names {
                IntegrandConfig::Catalog(n.clone()).build()?;
            }
        }
        match &self.sequence {
            SequenceConfig::PeriodicShift { phi, offset } => {
                phi_catalog(phi)?;
                if offset.as_ref().is_some_and(|o| o.len() != d) {
                    return Err(CliError::Invalid("sequence offset has the wrong dimension".into()));
                }
            }
            SequenceConfig::AveragingTiles { phi, fill, inner_cells } => {
                phi_catalog(phi)?;
                if fill.as_ref().is_some_and(|o| o.len() != d) {
                    return Err(CliError::Invalid("tile fill value has the wrong dimension".into()));
                }
                if *inner_cells == 0 {
                    return Err(CliError::Invalid("inner_cells must be positive".into()));
                }
            }
        }
        self.check_output_dir()
    }

    fn check_output_dir(&self) -> Result<(), CliError> {
        let dir = &self.output_dir;
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let probe = dir.join(".oscillab-write-probe");
        fs::write(&probe, b"").map_err(|e| CliError::io(&probe, e))?;
        fs::remove_file(&probe).map_err(|e| CliError::io(&probe, e))?;
        Ok(())
    }

    /// All state values named by `xi` and `xi_list`.
    pub fn xi_values(&self) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = self.xi.iter().cloned().collect();
        out.extend(self.xi_list.iter().flatten().cloned());
        out
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let c = parse_config(r#"{"command": "cellhom", "integrand": "weighted_quadratic", "xi": [1.0]}"#, Path::new("c.json")).unwrap();
        assert_eq!(c.command, Some(Command::Cellhom));
        assert_eq!(c.grid, GridConfig::default());
        assert_eq!((c.grid.n_x, c.grid.n_y, c.k_atoms), (512, 64, 4));
        assert_eq!(c.seeds, (1..=8).collect::<Vec<u64>>());
        assert_eq!(c.xi_values(), vec![vec![1.0]]);
    }

    #[test]
    fn unknown_key_reports_position() {
        let text = "{\n  \"command\": \"gamma\",\n  \"epsilon\": [0.1]\n}";
        match parse_config(text, Path::new("x.json")) {
            Err(CliError::Config { line, context, message, .. }) => {
                assert_eq!(line, 3);
                assert!(context.contains("epsilon"));
                assert!(message.contains("unknown field"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn inline_integrand_builds() {
        let c = parse_config(
            r#"{"integrand": {"pieces": [{"lo": -1, "hi": 1, "coeffs": [0, 0, 1]}], "weight": {"mean": 2, "sin": [1]}, "c": 3}}"#,
            Path::new("c.json"),
        )
        .unwrap();
        let f = c.integrand.unwrap().build().unwrap();
        assert!((f.eval(&[0.25], &[2.0]) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn catalog_errors_name_the_catalog() {
        let err = IntegrandConfig::Catalog("nope".into()).build().unwrap_err().to_string();
        assert!(err.contains("weighted_quadratic") && err.contains("nope"));
        let err = WConfig::Catalog("nope".into()).build().unwrap_err().to_string();
        assert!(err.contains("tilted_weighted"));
        assert!(phi_catalog("nope").is_err());
    }
}
