//! Dispatch of the experiment commands and their report files.

use std::f64::consts::PI;
use std::fs;
use std::time::{SystemTime, UNIX_EPOCH};

use oscillab::cellhom::{cof_hom_single_cell, f_hom_estimate_with, CellSolver};
use oscillab::integrands::{EnvelopeTable, IntegrandF};
use oscillab::lattice::{GridField, GridSpec};
use oscillab::nonlocal::{
    gamma_experiment, minimize_i_hom_k_schedule, reduce_y_independent, single_integral_gamma, Deformation, GammaExperiment,
    NonlocalOptions,
};
use oscillab::osclab::{
    dyadic_schedule, test_generation, test_product_structure, CellStateTest, MacroTest, OscillationSequence, SequenceKind,
};
use oscillab::ymeasure::{
    average_over_x, characterize, from_csv, periodic_shift_measure, standard_battery, AtomicYoungMeasure, CharacterizeOptions,
    Verdict,
};
use serde_json::{json, Value};

use crate::config::{phi_catalog, Command, ExperimentConfig, IntegrandConfig, SequenceConfig};
use crate::error::CliError;
use crate::output::{fmt_num, Cell, RunOutput};

/// Result of one command: verdict, summary and written files.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub summary: Value,
    pub files: Vec<std::path::PathBuf>,
}

impl Outcome {
    /// 0 on pass, 2 on a failed verdict.
    pub fn exit_code(&self) -> u8 {
        if self.passed {
            0
        } else {
            2
        }
    }
}

struct Report {
    passed: bool,
    label: String,
    details: Value,
}

/// Runs `command` and writes its CSV files, `summary.json` and `metadata.json`.
pub fn run(config: &ExperimentConfig, command: Command) -> Result<Outcome, CliError> {
    if let Some(c) = config.command {
        if c != command {
            return Err(CliError::Invalid(format!(
                "configuration is for '{}' but '{}' was requested",
                c.as_str(),
                command.as_str()
            )));
        }
    }
    let mut out = RunOutput::new(&config.output_dir)?;
    let report = match command {
        Command::Cellhom => cellhom(config, &mut out)?,
        Command::Convexify => convexify(config, &mut out)?,
        Command::YmCheck => ym_check(config, &mut out)?,
        Command::Oscillate => oscillate(config, &mut out)?,
        Command::Gamma => gamma(config, &mut out)?,
        Command::SingleGamma => single_gamma(config, &mut out)?,
    };
    let summary = json!({
        "command": command.as_str(),
        "experiment_id": format!("{}:{}", command.as_str(), report.label),
        "seeds": config.seeds,
        "verdict": if report.passed { "pass" } else { "fail" },
        "details": report.details,
    });
    out.json("summary.json", &summary)?;
    let timestamp = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    out.json(
        "metadata.json",
        &json!({
            "command": command.as_str(),
            "timestamp_unix": timestamp,
            "version": env!("CARGO_PKG_VERSION"),
            "threads": rayon::current_num_threads(),
            "config": serde_json::to_value(config)?,
        }),
    )?;
    Ok(Outcome {
        passed: report.passed,
        summary,
        files: out.files().to_vec(),
    })
}

fn require_integrand(config: &ExperimentConfig) -> Result<IntegrandF, CliError> {
    let f = config
        .integrand
        .as_ref()
        .ok_or_else(|| CliError::Invalid("this command needs an \"integrand\"".into()))?
        .build()?;
    if f.dim_macro != config.grid.dim_macro || f.dim_state != config.grid.dim_state {
        return Err(CliError::Invalid(format!(
            "integrand is defined for N = {}, d = {} but the grid has N = {}, d = {}",
            f.dim_macro, f.dim_state, config.grid.dim_macro, config.grid.dim_state
        )));
    }
    Ok(f)
}

fn subcells(config: &ExperimentConfig) -> usize {
    config.subcells.unwrap_or(config.grid.n_y)
}

/// Dyadic schedule from 1/8 down to the finest ε with 8 grid cells per period.
fn eps_schedule(config: &ExperimentConfig, spec: &GridSpec) -> Result<Vec<f64>, CliError> {
    if let Some(e) = &config.eps_schedule {
        return Ok(e.clone());
    }
    let h = (0..spec.dim_macro).map(|a| spec.macro_step(a)).fold(0.0, f64::max);
    let finest = ((1.0 / (8.0 * h)).log2().floor()) as i64;
    if finest < 3 {
        return Err(CliError::Invalid(
            "grid too coarse for the default ε schedule (need n_x ≥ 64); give eps_schedule explicitly".into(),
        ));
    }
    Ok(dyadic_schedule(3, finest as u32))
}

fn is_nonincreasing(values: &[f64], tol: f64) -> bool {
    values.windows(2).all(|p| p[1] <= p[0] + tol * (1.0 + p[0].abs()))
}

fn cellhom(config: &ExperimentConfig, out: &mut RunOutput) -> Result<Report, CliError> {
    let f = require_integrand(config)?;
    let xis = config.xi_values();
    if xis.is_empty() {
        return Err(CliError::Invalid("cellhom needs \"xi\" or \"xi_list\"".into()));
    }
    let m = subcells(config);
    let solver = CellSolver::default();
    let mut rows = Vec::new();
    let mut per_xi = Vec::new();
    let mut all_monotone = true;
    for (idx, xi) in xis.iter().enumerate() {
        let est = f_hom_estimate_with(&solver, &f, xi, &config.t_schedule, m, config.seed(), config.tolerances.cell_rel_tol)?;
        let values: Vec<f64> = est.per_t_values.iter().map(|p| p.1).collect();
        let monotone = is_nonincreasing(&values, config.tolerances.monotone_tol);
        all_monotone &= monotone;
        for (t, v) in &est.per_t_values {
            let mut row: Vec<Cell> = xi.iter().map(|x| Cell::Num(*x)).collect();
            row.push((*t).into());
            row.push((*v).into());
            rows.push(row);
        }
        if config.plots {
            let pts: Vec<(f64, f64)> = est.per_t_values.iter().map(|(t, v)| (*t as f64, *v)).collect();
            out.plot(&format!("plot_cellhom_{idx}.csv"), ("T", "value"), &pts)?;
        }
        per_xi.push(json!({
            "xi": xi,
            "extrapolated": est.extrapolated,
            "status": est.status.as_str(),
            "monotone": monotone,
        }));
    }
    let mut header: Vec<String> = (0..config.grid.dim_state).map(|a| format!("xi_{a}")).collect();
    header.push("T".into());
    header.push("value".into());
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    out.csv("cellhom.csv", &header_refs, rows)?;
    Ok(Report {
        passed: all_monotone,
        label: f.label.clone(),
        details: json!({ "subcells": m, "t_schedule": config.t_schedule, "estimates": per_xi }),
    })
}

fn convexify(config: &ExperimentConfig, out: &mut RunOutput) -> Result<Report, CliError> {
    let f = require_integrand(config)?;
    if f.dim_state != 1 || f.dim_macro != 1 {
        return Err(oscillab::Error::UnsupportedDimension {
            got: f.dim_state.max(f.dim_macro),
            supported: 1,
        }
        .into());
    }
    let spec = config.grid.spec()?;
    let ys: Vec<Vec<f64>> = spec.cell_points().iter().map(|y| y.to_vec()).collect();
    let grid = EnvelopeTable::default_grid(f.window, config.envelope_intervals);
    let table = EnvelopeTable::build(&f, &ys, grid)?;
    let invariants = table.check_invariants(&f);
    let mut rows = Vec::with_capacity(ys.len() * table.xi_grid.len());
    for (r, slice) in table.slices.iter().enumerate() {
        for (k, &xi) in table.xi_grid.iter().enumerate() {
            rows.push(vec![
                Cell::Num(ys[r][0]),
                Cell::Num(xi),
                Cell::Num(f.eval(&ys[r], &[xi])),
                Cell::Num(slice.values[k]),
                slice.contact[k.min(slice.contact.len() - 1)].into(),
            ]);
        }
    }
    out.csv("envelope.csv", &["y", "xi", "f", "cof", "contact_interval"], rows)?;

    let mut xis = config.xi_values();
    if xis.is_empty() {
        xis = [-2.0, -1.0, 0.0, 0.5, 1.0, 2.0].iter().map(|v| vec![*v]).collect();
    }
    let m = subcells(config);
    let solver = CellSolver::default();
    let mut identity_ok = true;
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for xi in &xis {
        let est = f_hom_estimate_with(&solver, &f, xi, &config.t_schedule, m, config.seed(), config.tolerances.cell_rel_tol)?;
        let co = cof_hom_single_cell(&f, xi, m, config.seed())?;
        let diff = (est.extrapolated - co).abs();
        let tol = config.tolerances.identity_tol * (1.0 + co.abs());
        identity_ok &= diff <= tol;
        worst = worst.max(diff / (1.0 + co.abs()));
        rows.push(vec![Cell::Num(xi[0]), est.extrapolated.into(), co.into(), diff.into(), tol.into()]);
    }
    out.csv("identity.csv", &["xi", "f_hom", "cof_hom", "diff", "tolerance"], rows)?;
    if config.plots {
        let mid = ys.len() / 2;
        let pts: Vec<(f64, f64)> = table.xi_grid.iter().zip(&table.slices[mid].values).map(|(a, b)| (*a, *b)).collect();
        out.plot("plot_envelope.csv", ("xi", "cof"), &pts)?;
    }
    let passed = invariants.is_ok() && identity_ok;
    Ok(Report {
        passed,
        label: f.label.clone(),
        details: json!({
            "envelope_invariants": match &invariants { Ok(()) => "ok".to_string(), Err(e) => e.to_string() },
            "identity_worst_relative_diff": worst,
            "identity_ok": identity_ok,
        }),
    })
}

fn battery(config: &ExperimentConfig) -> Result<Vec<IntegrandF>, CliError> {
    match &config.battery {
        None => Ok(standard_battery()),
        Some(names) => names.iter().map(|n| IntegrandConfig::Catalog(n.clone()).build()).collect(),
    }
}

fn ym_check(config: &ExperimentConfig, out: &mut RunOutput) -> Result<Report, CliError> {
    let path = config
        .measure
        .as_ref()
        .ok_or_else(|| CliError::Invalid("ym-check needs a \"measure\" CSV path".into()))?;
    let spec = config.grid.spec()?;
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let nu = from_csv(&spec, &text)?;
    let expected = match &config.expected_deformation {
        Some(c) => Some(GridField::constant(spec.clone(), c)?),
        None => None,
    };
    let options = CharacterizeOptions {
        gap_rel_tol: config.tolerances.gap_rel_tol,
        subcells: config.subcells,
        seed: config.seed(),
        expected_deformation: expected,
        ..CharacterizeOptions::default()
    };
    let report = characterize(&nu, &battery(config)?, &options)?;
    let rows = report
        .jensen_gaps
        .iter()
        .map(|g| vec![Cell::Text(g.label.clone()), g.worst_cell.into(), g.gap.into(), g.tolerance.into()]);
    out.csv("ym_check.csv", &["battery_member", "worst_macro_cell", "gap", "tolerance"], rows)?;
    for d in &report.diagnostics {
        eprintln!("ym-check: {d}");
    }
    Ok(Report {
        passed: report.verdict == Verdict::Consistent,
        label: path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
        details: json!({
            "verdict": report.verdict.as_str(),
            "p_moment": if report.p_moment.is_finite() { json!(report.p_moment) } else { Value::Null },
            "diagnostics": report.diagnostics,
        }),
    })
}

fn z_battery() -> Vec<MacroTest> {
    vec![
        MacroTest::new("1", |_| 1.0),
        MacroTest::new("x", |x| x[0]),
        MacroTest::new("exp(x)", |x| x[0].exp()),
    ]
}

fn psi_battery() -> Vec<CellStateTest> {
    vec![
        CellStateTest::new("xi", |_, xi| xi[0]),
        CellStateTest::new("xi^2", |_, xi| xi[0] * xi[0]),
        CellStateTest::new("xi*sin(2pi y)", |y, xi| xi[0] * (2.0 * PI * y[0]).sin()),
    ]
}

/// Inner measure `δ_{s₀ φ(y)}` averaged over the tile coordinate `s`, placed on
/// the macro grid of `spec` with `n_s` macro cells.
fn tile_target(phi_name: &str, spec: &GridSpec, n_s: usize) -> Result<AtomicYoungMeasure, CliError> {
    let (phi, periods) = phi_catalog(phi_name)?;
    let unit = GridSpec::new(
        spec.dim_macro,
        spec.dim_state,
        n_s,
        spec.n_y,
        vec![0.0; spec.dim_macro],
        vec![1.0; spec.dim_macro],
        spec.p_exponent,
    )?;
    let ys = unit.cell_points();
    let s_points = unit.macro_points();
    let mut lists = Vec::with_capacity(unit.n_macro_cells() * unit.n_cell_cells());
    for s in s_points.iter() {
        for y in ys.iter() {
            let list = (0..periods)
                .map(|t| {
                    let mut shifted = y.to_vec();
                    shifted[0] += t as f64;
                    let v: Vec<f64> = phi(&shifted).iter().map(|p| s[0] * p).collect();
                    (v, 1.0 / periods as f64)
                })
                .collect();
            lists.push(list);
        }
    }
    let window = oscillab::integrands::DEFAULT_WINDOW;
    let inner = AtomicYoungMeasure::from_cell_lists(unit, lists, window)?;
    let averaged = average_over_x(&inner);
    let target_spec = spec.with_n_x(n_s);
    Ok(AtomicYoungMeasure::from_raw(
        target_spec,
        averaged.atoms_per_cell(),
        averaged.atoms().to_vec(),
        averaged.weights().to_vec(),
    )?)
}

fn oscillate(config: &ExperimentConfig, out: &mut RunOutput) -> Result<Report, CliError> {
    let spec = config.grid.spec()?;
    if spec.dim_state != 1 {
        return Err(CliError::Invalid("oscillate uses scalar profiles; set grid.dim_state = 1".into()));
    }
    let schedule = eps_schedule(config, &spec)?;
    let (kind, target, label, tiled) = match &config.sequence {
        SequenceConfig::PeriodicShift { phi, offset } => {
            let (profile, periods) = phi_catalog(phi)?;
            let offset = offset.clone().unwrap_or_else(|| vec![0.0; spec.dim_state]);
            let atoms_cap = periods.pow(spec.dim_macro as u32);
            let p2 = profile.clone();
            let target = periodic_shift_measure(&move |y: &[f64]| p2(y), &offset, periods, &spec, atoms_cap)?;
            let kind = SequenceKind::PeriodicShift { phi: profile, offset };
            (kind, target, format!("periodic_shift:{phi}"), false)
        }
        SequenceConfig::AveragingTiles { phi, fill, inner_cells } => {
            let (profile, _) = phi_catalog(phi)?;
            let fill = fill.clone().unwrap_or_else(|| vec![0.0; spec.dim_state]);
            let inner = SequenceKind::custom(move |s, eps| {
                let arg: Vec<f64> = s.iter().map(|t| t / eps).collect();
                profile(&arg).iter().map(|v| s[0] * v).collect()
            });
            let target = tile_target(phi, &spec, *inner_cells)?;
            (SequenceKind::averaging_tiles(inner, fill), target, format!("averaging_tiles:{phi}"), true)
        }
    };
    let seq = OscillationSequence::new(kind, schedule.clone(), spec.clone())?;
    let results = test_generation(&seq, &target, &z_battery(), &psi_battery())?;
    let mut rows = Vec::new();
    let mut tests = Vec::new();
    let mut pairing_ok = true;
    for r in &results {
        for ((eps, v), e) in r.eps.iter().zip(&r.values).zip(r.errors()) {
            rows.push(vec![Cell::Text(r.test_id.clone()), (*eps).into(), (*v).into(), r.target.into(), e.into()]);
        }
        let ok = if tiled {
            r.final_error() <= config.tolerances.pairing_gap
        } else {
            r.passes(config.tolerances.rate_min)
        };
        pairing_ok &= ok;
        tests.push(json!({
            "test": r.test_id,
            "rate": r.rate_estimate,
            "exact": r.exact,
            "final_error": r.final_error(),
            "pass": ok,
        }));
    }
    out.csv("pairings.csv", &["test", "eps", "value", "target", "error"], rows)?;

    let one = |_: &[f64]| 1.0;
    let sq = |_: &[f64], xi: &[f64]| xi[0] * xi[0];
    let product = test_product_structure(&seq, &target, &one, &one, &sq, &sq)?;
    let rows = product
        .eps
        .iter()
        .zip(&product.joint)
        .zip(&product.gaps)
        .map(|((e, j), g)| vec![Cell::Num(*e), (*j).into(), product.product_of_marginals.into(), (*g).into()]);
    out.csv("product.csv", &["eps", "joint", "product_of_marginals", "gap"], rows)?;
    let product_final = *product.gaps.last().unwrap_or(&f64::NAN);
    let product_ok = tiled || product_final <= config.tolerances.product_gap;
    if config.plots {
        for r in &results {
            let pts: Vec<(f64, f64)> = r.eps.iter().zip(r.errors()).map(|(a, b)| (*a, b)).collect();
            let name = r.test_id.replace(|c: char| !c.is_ascii_alphanumeric(), "_");
            out.plot(&format!("plot_pairing_{name}.csv"), ("eps", "error"), &pts)?;
        }
    }
    Ok(Report {
        passed: pairing_ok && product_ok,
        label,
        details: json!({
            "eps_schedule": schedule,
            "pairings": tests,
            "product_final_gap": product_final,
            "product_ok": product_ok,
        }),
    })
}

fn gamma(config: &ExperimentConfig, out: &mut RunOutput) -> Result<Report, CliError> {
    let w = config
        .w
        .as_ref()
        .ok_or_else(|| CliError::Invalid("gamma needs a non-local density \"W\"".into()))?
        .build()?;
    let spec = config.grid.spec()?;
    let schedule = eps_schedule(config, &spec)?;
    let (w, y_independent) = match reduce_y_independent(&w, 256, config.seed()) {
        Ok(flagged) => (flagged, true),
        Err(oscillab::Error::Refused(_)) => (w, false),
        Err(e) => return Err(e.into()),
    };
    let constraint = match &config.deformation {
        None => Deformation::Free,
        Some(c) => Deformation::Fixed(GridField::constant(spec.clone(), c)?),
    };
    let opts = NonlocalOptions::default();
    let exp = GammaExperiment {
        w: w.clone(),
        eps_schedule: schedule,
        spec: spec.clone(),
        constraint: constraint.clone(),
        k_atoms: config.k_atoms,
        seeds: config.seeds.clone(),
    };
    let rep = gamma_experiment(&exp, &opts)?;
    let rows = rep
        .rows
        .iter()
        .map(|r| vec![Cell::Num(r.eps), r.min_i_eps.into(), r.i_hom.into(), r.gap.into()]);
    out.csv("gamma.csv", &["eps", "min_I_eps", "I_hom", "gap"], rows)?;
    if config.plots {
        let pts: Vec<(f64, f64)> = rep.rows.iter().map(|r| (r.eps, r.gap)).collect();
        out.plot("plot_gamma.csv", ("eps", "gap"), &pts)?;
    }
    let tol = &config.tolerances;
    let final_gap = rep.rows.last().map(|r| r.gap).unwrap_or(f64::NAN);
    let gap_ok = final_gap <= tol.final_gap * rep.i_hom.abs() + tol.abs_floor;
    let mut k_ok = true;
    let mut k_values = Vec::new();
    if let Some(ks) = &config.k_list {
        let mut ks = ks.clone();
        ks.sort_unstable();
        ks.dedup();
        let sched = minimize_i_hom_k_schedule(&w, &constraint, &ks, &spec, config.seed(), &opts)?;
        let values: Vec<f64> = sched.iter().map(|h| h.value).collect();
        k_ok = is_nonincreasing(&values, tol.monotone_tol);
        out.csv(
            "k_schedule.csv",
            &["K", "I_hom"],
            ks.iter().zip(&values).map(|(k, v)| vec![Cell::from(*k), Cell::Num(*v)]),
        )?;
        k_values = values;
    }
    Ok(Report {
        passed: gap_ok && rep.tail_nonincreasing && k_ok,
        label: w.label.clone(),
        details: json!({
            "I_hom": rep.i_hom,
            "final_gap": final_gap,
            "final_relative_gap": rep.final_relative_gap,
            "tail_nonincreasing": rep.tail_nonincreasing,
            "weak_gaps": rep.rows.iter().map(|r| r.weak_gap).collect::<Vec<_>>(),
            "y_independent": y_independent,
            "separable": rep.hom.separable,
            "k_values": k_values,
            "k_monotone": k_ok,
            "audit": rep.hom.audit.as_ref().map(|a| a.verdict.as_str()),
        }),
    })
}

fn single_gamma(config: &ExperimentConfig, out: &mut RunOutput) -> Result<Report, CliError> {
    let f = require_integrand(config)?;
    let spec = config.grid.spec()?;
    let schedule = eps_schedule(config, &spec)?;
    let rep = single_integral_gamma(&f, &schedule, &spec, config.seed())?;
    let rows = rep
        .rows
        .iter()
        .zip(&rep.gaps)
        .map(|((e, v), g)| vec![Cell::Num(*e), (*v).into(), rep.min_hom.into(), (*g).into()]);
    out.csv("single_gamma.csv", &["eps", "min_F_eps", "min_hom", "gap"], rows)?;
    let tol = &config.tolerances;
    let final_gap = *rep.gaps.last().unwrap_or(&f64::NAN);
    let passed = final_gap <= tol.final_gap * rep.min_hom.abs() + tol.abs_floor;
    Ok(Report {
        passed,
        label: f.label.clone(),
        details: json!({
            "min_hom": rep.min_hom,
            "xi_star": rep.xi_star,
            "final_gap": final_gap,
            "final_gap_text": fmt_num(final_gap),
        }),
    })
}
