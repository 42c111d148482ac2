//! The homogenized density from the periodic cell formula
//!
//! `f_hom(ξ) = lim_T T^{-N} inf { ∫_{(0,T)^N} f(⟨x⟩, ξ + v(x)) dx : ∫ v = 0 }`
//!
//! with competitors `v` cellwise constant on a `(T·m)^N` subcell grid. The
//! problem only couples subcells through the zero-mean constraint, so a
//! projected gradient method (projection = subtract the mean) is enough.

use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::integrands::{EnvelopeTable, IntegrandF};
use crate::lattice::fold_scalar;
use crate::numerics::{pairwise_sum, projected_gradient_descent, seeded_rng, DescentOptions, DescentProblem};

/// One instance of the cell minimization at a fixed number of periods.
#[derive(Debug, Clone)]
pub struct CellProblem {
    pub f: IntegrandF,
    pub xi: Vec<f64>,
    /// Number of unit cells per axis.
    pub periods: usize,
    /// Subcells per unit cell per axis.
    pub subcells: usize,
}

impl CellProblem {
    pub fn new(f: IntegrandF, xi: Vec<f64>, periods: usize, subcells: usize) -> Result<Self> {
        if periods == 0 || subcells == 0 {
            return Err(Error::InvalidArgument("T and m must be at least 1".into()));
        }
        if xi.len() != f.dim_state {
            return Err(Error::InvalidArgument(format!(
                "ξ has {} components, the density expects {}",
                xi.len(),
                f.dim_state
            )));
        }
        if xi.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("ξ must be finite".into()));
        }
        Ok(CellProblem {
            f,
            xi,
            periods,
            subcells,
        })
    }

    pub fn n_subcells(&self) -> usize {
        (self.periods * self.subcells).pow(self.f.dim_macro as u32)
    }

    /// Folded midpoints `⟨x_i⟩` of the subcells of `(0, T)^N`.
    pub fn subcell_points(&self) -> Vec<Vec<f64>> {
        subcell_points(self.f.dim_macro, self.periods, self.subcells)
    }

    /// Objective at a given competitor (not projected).
    pub fn objective(&self, v: &[f64]) -> f64 {
        CellObjective::new(self).objective(v)
    }
}

pub fn subcell_points(dim_macro: usize, periods: usize, subcells: usize) -> Vec<Vec<f64>> {
    let per_axis = periods * subcells;
    let total = per_axis.pow(dim_macro as u32);
    (0..total)
        .map(|idx| {
            let mut rest = idx;
            (0..dim_macro)
                .map(|_| {
                    let k = rest % per_axis;
                    rest /= per_axis;
                    fold_scalar((k as f64 + 0.5) / subcells as f64)
                })
                .collect()
        })
        .collect()
}

struct CellObjective<'a> {
    f: &'a IntegrandF,
    xi: &'a [f64],
    ys: Vec<Vec<f64>>,
}

impl<'a> CellObjective<'a> {
    fn new(prob: &'a CellProblem) -> Self {
        CellObjective {
            f: &prob.f,
            xi: &prob.xi,
            ys: prob.subcell_points(),
        }
    }

    fn state(&self, v: &[f64], i: usize, buf: &mut [f64]) {
        let d = self.xi.len();
        for c in 0..d {
            buf[c] = self.xi[c] + v[i * d + c];
        }
    }
}

impl DescentProblem for CellObjective<'_> {
    fn objective(&self, v: &[f64]) -> f64 {
        let d = self.xi.len();
        let mut buf = vec![0.0; d];
        let terms: Vec<f64> = self
            .ys
            .iter()
            .enumerate()
            .map(|(i, y)| {
                self.state(v, i, &mut buf);
                self.f.eval(y, &buf)
            })
            .collect();
        pairwise_sum(&terms) / self.ys.len() as f64
    }

    // Gradient in the L² metric of the subcell measure: the derivative of f
    // in each subcell, by central differences.
    fn gradient(&self, v: &[f64], g: &mut [f64]) {
        let d = self.xi.len();
        let mut buf = vec![0.0; d];
        for (i, y) in self.ys.iter().enumerate() {
            for c in 0..d {
                self.state(v, i, &mut buf);
                let h = 1e-6 * (1.0 + v[i * d + c].abs());
                buf[c] += h;
                let up = self.f.eval(y, &buf);
                buf[c] -= 2.0 * h;
                let down = self.f.eval(y, &buf);
                g[i * d + c] = (up - down) / (2.0 * h);
            }
        }
    }

    fn project(&self, v: &mut [f64]) {
        project_zero_mean(v, self.xi.len());
    }
}

/// Subtracts the componentwise mean of a list of `d`-vectors.
pub fn project_zero_mean(v: &mut [f64], d: usize) {
    let n = v.len() / d;
    for c in 0..d {
        let comp: Vec<f64> = (0..n).map(|i| v[i * d + c]).collect();
        let mean = pairwise_sum(&comp) / n as f64;
        for i in 0..n {
            v[i * d + c] -= mean;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellSolverOptions {
    pub starts: usize,
    pub descent: DescentOptions,
}

impl Default for CellSolverOptions {
    fn default() -> Self {
        CellSolverOptions {
            starts: 8,
            descent: DescentOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSolution {
    /// Best zero-mean competitor found.
    pub v: Vec<f64>,
    pub value: f64,
    /// Objective of the `v = 0` competitor.
    pub zero_value: f64,
}

/// Multi-start projected gradient solver for the cell problem.
#[derive(Debug, Clone, Default)]
pub struct CellSolver {
    pub options: CellSolverOptions,
}

impl CellSolver {
    pub fn new(options: CellSolverOptions) -> Self {
        CellSolver { options }
    }

    pub fn solve(&self, prob: &CellProblem, seed: u64) -> Result<CellSolution> {
        self.solve_with_starts(prob, seed, &[])
    }

    /// Like [`CellSolver::solve`], with extra caller-supplied starting competitors.
    pub fn solve_with_starts(&self, prob: &CellProblem, seed: u64, extra: &[Vec<f64>]) -> Result<CellSolution> {
        let objective = CellObjective::new(prob);
        let n = prob.n_subcells() * prob.xi.len();
        let zero = vec![0.0; n];
        let zero_value = objective.objective(&zero);
        let mut window = prob.f.window;
        for _attempt in 0..2 {
            let mut starts: Vec<Vec<f64>> = (0..self.options.starts as u64)
                .map(|s| {
                    let mut rng = seeded_rng(seed.wrapping_add(s));
                    (0..n)
                        .map(|k| rng.gen_range(window.0..window.1) - prob.xi[k % prob.xi.len()])
                        .collect()
                })
                .collect();
            starts.extend(extra.iter().filter(|s| s.len() == n).cloned());
            let outcomes: Vec<_> = starts
                .into_par_iter()
                .map(|x0| projected_gradient_descent(&objective, x0, &self.options.descent))
                .collect();
            let best = outcomes
                .into_iter()
                .filter(|o| o.value.is_finite())
                .fold(None::<(Vec<f64>, f64)>, |best, o| match best {
                    Some((_, bv)) if bv <= o.value => best,
                    _ => Some((o.x, o.value)),
                });
            match best {
                Some((v, value)) => {
                    if zero_value.is_finite() && zero_value <= value {
                        return Ok(CellSolution {
                            v: zero,
                            value: zero_value,
                            zero_value,
                        });
                    }
                    return Ok(CellSolution { v, value, zero_value });
                }
                None => {
                    let mid = 0.5 * (window.0 + window.1);
                    let half = window.1 - window.0;
                    window = (mid - half, mid + half);
                }
            }
        }
        if zero_value.is_finite() {
            return Ok(CellSolution {
                v: zero,
                value: zero_value,
                zero_value,
            });
        }
        Err(Error::EvaluationFailure(format!(
            "cell objective of {} is not finite at ξ = {:?}",
            prob.f.label, prob.xi
        )))
    }
}

/// Approximate cell infimum with the default solver (8 seeded starts).
pub fn cell_infimum(prob: &CellProblem, seed: u64) -> Result<f64> {
    CellSolver::default().solve(prob, seed).map(|s| s.value)
}

/// Exhaustive minimum over competitors taking values in `value_grid` with
/// exactly zero mean (to round-off). Only for tiny instances.
pub fn brute_force_cell_oracle(prob: &CellProblem, value_grid: &[f64]) -> Result<f64> {
    if prob.xi.len() != 1 {
        return Err(Error::UnsupportedDimension {
            got: prob.xi.len(),
            supported: 1,
        });
    }
    let n = prob.n_subcells();
    if n > 8 || value_grid.len() > 9 || value_grid.is_empty() {
        return Err(Error::CapacityExceeded(format!(
            "oracle enumerates at most 8 subcells and 9 values (got {n} and {})",
            value_grid.len()
        )));
    }
    let ys = prob.subcell_points();
    let xi = prob.xi[0];
    // f values per (subcell, grid value)
    let table: Vec<Vec<f64>> = ys
        .iter()
        .map(|y| value_grid.iter().map(|&g| prob.f.eval(y, &[xi + g])).collect())
        .collect();
    let gmin = value_grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let gmax = value_grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let tol = 1e-12 * n as f64 * (1.0 + gmin.abs().max(gmax.abs()));
    let mut best = f64::INFINITY;
    let mut chosen = vec![0usize; n];

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        cell: usize,
        sum: f64,
        n: usize,
        grid: &[f64],
        gmin: f64,
        gmax: f64,
        tol: f64,
        table: &[Vec<f64>],
        chosen: &mut [usize],
        best: &mut f64,
    ) {
        let remaining = (n - cell) as f64;
        if sum + remaining * gmax < -tol || sum + remaining * gmin > tol {
            return;
        }
        if cell == n {
            let terms: Vec<f64> = chosen.iter().enumerate().map(|(i, &k)| table[i][k]).collect();
            let value = pairwise_sum(&terms) / n as f64;
            if value < *best {
                *best = value;
            }
            return;
        }
        for (k, &g) in grid.iter().enumerate() {
            chosen[cell] = k;
            recurse(cell + 1, sum + g, n, grid, gmin, gmax, tol, table, chosen, best);
        }
    }

    recurse(0, 0.0, n, value_grid, gmin, gmax, tol, &table, &mut chosen, &mut best);
    if best.is_finite() {
        Ok(best)
    } else {
        Err(Error::InvalidArgument(
            "no zero-mean assignment exists on this value grid".into(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HomStatus {
    Converged,
    PlateauNotReached,
}

impl HomStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            HomStatus::Converged => "converged",
            HomStatus::PlateauNotReached => "plateau-not-reached",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomDensityEstimate {
    pub xi: Vec<f64>,
    pub per_t_values: Vec<(usize, f64)>,
    /// Value at the largest T of the schedule.
    pub extrapolated: f64,
    pub status: HomStatus,
}

pub const DEFAULT_T_SCHEDULE: &[usize] = &[1, 2, 4, 8];
pub const DEFAULT_REL_TOL: f64 = 1e-2;

/// Periodic extension of a competitor from `T` to `k·T` periods per axis.
fn periodic_extension(v: &[f64], dim_macro: usize, d: usize, from_axis: usize, to_axis: usize) -> Vec<f64> {
    let total = to_axis.pow(dim_macro as u32);
    let mut out = Vec::with_capacity(total * d);
    for idx in 0..total {
        let mut rest = idx;
        let mut src = 0;
        let mut stride = 1;
        for _ in 0..dim_macro {
            let k = rest % to_axis;
            rest /= to_axis;
            src += (k % from_axis) * stride;
            stride *= from_axis;
        }
        out.extend_from_slice(&v[src * d..(src + 1) * d]);
    }
    out
}

/// Runs the cell solver along an increasing T-schedule. When T is a multiple
/// of the previous entry, the periodically extended previous minimizer is
/// added as a start, so the sequence is nonincreasing.
pub fn f_hom_estimate_with(
    solver: &CellSolver,
    f: &IntegrandF,
    xi: &[f64],
    t_schedule: &[usize],
    m: usize,
    seed: u64,
    rel_tol: f64,
) -> Result<HomDensityEstimate> {
    if t_schedule.is_empty() || t_schedule.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSchedule("T schedule must be nonempty and increasing".into()));
    }
    let mut per_t = Vec::with_capacity(t_schedule.len());
    let mut previous: Option<(usize, Vec<f64>)> = None;
    for &t in t_schedule {
        let prob = CellProblem::new(f.clone(), xi.to_vec(), t, m)?;
        let mut extra = Vec::new();
        if let Some((t_prev, v_prev)) = &previous {
            if t % t_prev == 0 {
                extra.push(periodic_extension(v_prev, f.dim_macro, xi.len(), t_prev * m, t * m));
            }
        }
        let sol = solver.solve_with_starts(&prob, seed, &extra)?;
        per_t.push((t, sol.value));
        previous = Some((t, sol.v));
    }
    let extrapolated = per_t.last().unwrap().1;
    let status = match per_t.len() {
        1 => HomStatus::PlateauNotReached,
        k => {
            let prev = per_t[k - 2].1;
            if (extrapolated - prev).abs() < rel_tol * (1.0 + extrapolated.abs()) {
                HomStatus::Converged
            } else {
                HomStatus::PlateauNotReached
            }
        }
    };
    Ok(HomDensityEstimate {
        xi: xi.to_vec(),
        per_t_values: per_t,
        extrapolated,
        status,
    })
}

pub fn f_hom_estimate(f: &IntegrandF, xi: &[f64], t_schedule: &[usize], m: usize, seed: u64) -> Result<HomDensityEstimate> {
    f_hom_estimate_with(&CellSolver::default(), f, xi, t_schedule, m, seed, DEFAULT_REL_TOL)
}

/// Number of ξ-intervals of the envelope tables used by the convexified formula.
pub const ENVELOPE_INTERVALS: usize = 800;

/// `co f` on the unit-cell subcells as an integrand: row lookup by subcell,
/// envelope evaluation in ξ.
pub fn envelope_integrand(f: &IntegrandF, m: usize) -> Result<IntegrandF> {
    if f.dim_state != 1 {
        return Err(Error::UnsupportedDimension {
            got: f.dim_state,
            supported: 1,
        });
    }
    let ys = subcell_points(f.dim_macro, 1, m);
    let table = Arc::new(EnvelopeTable::build(
        f,
        &ys,
        EnvelopeTable::default_grid(f.window, ENVELOPE_INTERVALS),
    )?);
    let base = f.clone();
    let dim = f.dim_macro;
    let env = IntegrandF::new(format!("co({})", f.label), f.growth_c, f.p, move |y, xi| {
        let mut row = 0;
        let mut stride = 1;
        for &ya in y.iter().take(dim) {
            let k = ((ya * m as f64).floor() as usize).min(m - 1);
            row += k * stride;
            stride *= m;
        }
        table.eval(&base, row, xi[0])
    })
    .with_dims(f.dim_macro, 1)
    .with_window(f.window.0, f.window.1);
    Ok(env)
}

/// `(co f)_hom(ξ)` by the single-cell (T = 1) formula applied to the convex
/// envelope of `f` in ξ.
pub fn cof_hom_single_cell_with(solver: &CellSolver, f: &IntegrandF, xi: &[f64], m: usize, seed: u64) -> Result<f64> {
    let env = envelope_integrand(f, m)?;
    let prob = CellProblem::new(env, xi.to_vec(), 1, m)?;
    solver.solve(&prob, seed).map(|s| s.value)
}

pub fn cof_hom_single_cell(f: &IntegrandF, xi: &[f64], m: usize, seed: u64) -> Result<f64> {
    cof_hom_single_cell_with(&CellSolver::default(), f, xi, m, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    /// ∫_0^1 dy / (2 + sin 2πy) by composite Simpson on 20000 intervals.
    fn harmonic_oracle() -> f64 {
        let n = 20000;
        let h = 1.0 / n as f64;
        let g = |y: f64| 1.0 / (2.0 + (2.0 * PI * y).sin());
        let mut s = g(0.0) + g(1.0);
        for i in 1..n {
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn harmonic_oracle_is_one_over_sqrt3() {
        assert!((harmonic_oracle() - 1.0 / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn convex_y_independent_density_keeps_zero() {
        let f = IntegrandF::catalog("quadratic").unwrap();
        for t in [1, 2, 3] {
            let prob = CellProblem::new(f.clone(), vec![2.0], t, 4).unwrap();
            let v = cell_infimum(&prob, 11).unwrap();
            assert!((v - 4.0).abs() < 1e-6, "T = {t}: {v}");
        }
    }

    #[test]
    fn weighted_quadratic_harmonic_mean() {
        let f = IntegrandF::catalog("weighted_quadratic").unwrap();
        let prob = CellProblem::new(f, vec![1.0], 1, 256).unwrap();
        let v = cell_infimum(&prob, 1).unwrap();
        let oracle = 1.0 / harmonic_oracle();
        assert!((v - oracle).abs() < 2e-3, "{v} vs {oracle}");
    }

    #[test]
    fn double_well_oscillates_to_zero() {
        let f = IntegrandF::catalog("double_well").unwrap();
        let prob = CellProblem::new(f, vec![0.0], 8, 8).unwrap();
        let sol = CellSolver::default().solve(&prob, 5).unwrap();
        assert!(sol.value <= 0.05, "{}", sol.value);
        assert!(sol.value <= sol.zero_value);
        assert!(sol.v.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn oracle_examples() {
        let q = IntegrandF::catalog("quadratic").unwrap();
        let prob = CellProblem::new(q, vec![0.0], 1, 2).unwrap();
        assert_eq!(brute_force_cell_oracle(&prob, &[-1.0, 0.0, 1.0]).unwrap(), 0.0);

        // exhaustive list of the 9 assignments, of which (-1, 1), (0, 0), (1, -1) are zero-mean
        let dw = IntegrandF::catalog("double_well").unwrap();
        let prob = CellProblem::new(dw.clone(), vec![0.0], 1, 2).unwrap();
        let grid = [-1.0, 0.0, 1.0];
        let mut manual = f64::INFINITY;
        for a in grid {
            for b in grid {
                if a + b == 0.0 {
                    manual = manual.min(0.5 * (dw.eval(&[0.25], &[a]) + dw.eval(&[0.75], &[b])));
                }
            }
        }
        assert_eq!(manual, 0.0);
        assert_eq!(brute_force_cell_oracle(&prob, &grid).unwrap(), manual);

        let wq = IntegrandF::catalog("weighted_quadratic").unwrap();
        let prob = CellProblem::new(wq, vec![1.0], 1, 2).unwrap();
        let oracle = brute_force_cell_oracle(&prob, &[-0.5, 0.0, 0.5]).unwrap();
        // two subcells sample a = 3 and a = 1; the discrete infimum is their
        // harmonic mean 1.5, attained by v = (-1/2, 1/2)
        assert!((oracle - 1.5).abs() < 1e-12, "{oracle}");
        let inf = cell_infimum(&prob, 3).unwrap();
        assert!(inf <= oracle + 1e-6);
        assert!((inf - 1.5).abs() < 1e-9);

        let big = CellProblem::new(IntegrandF::catalog("quadratic").unwrap(), vec![0.0], 3, 3).unwrap();
        assert!(matches!(
            brute_force_cell_oracle(&big, &[0.0]),
            Err(Error::CapacityExceeded(_))
        ));
    }

    #[test]
    fn estimate_schedules() {
        let q = IntegrandF::catalog("quadratic").unwrap();
        let est = f_hom_estimate(&q, &[1.0], DEFAULT_T_SCHEDULE, 4, 0).unwrap();
        assert_eq!(est.status, HomStatus::Converged);
        for (_, v) in &est.per_t_values {
            assert!((v - 1.0).abs() < 1e-9);
        }

        let dw = IntegrandF::catalog("double_well").unwrap();
        let est = f_hom_estimate(&dw, &[0.0], DEFAULT_T_SCHEDULE, 4, 0).unwrap();
        assert!(est.extrapolated <= 0.05, "{est:?}");
        for w in est.per_t_values.windows(2) {
            assert!(w[1].1 <= w[0].1 + 1e-9, "{est:?}");
        }

        let wq = IntegrandF::catalog("weighted_quadratic").unwrap();
        let est = f_hom_estimate(&wq, &[1.0], DEFAULT_T_SCHEDULE, 32, 0).unwrap();
        for (_, v) in &est.per_t_values {
            assert!((v - 3f64.sqrt()).abs() < 2e-3, "{est:?}");
        }
        assert!(f_hom_estimate(&wq, &[1.0], &[2, 1], 4, 0).is_err());
    }

    #[test]
    fn convexified_single_cell() {
        let q = IntegrandF::catalog("quadratic").unwrap();
        assert!((cof_hom_single_cell(&q, &[1.0], 8, 0).unwrap() - 1.0).abs() < 1e-9);
        let dw = IntegrandF::catalog("double_well").unwrap();
        assert!(cof_hom_single_cell(&dw, &[0.0], 8, 0).unwrap().abs() < 1e-3);
        assert!((cof_hom_single_cell(&dw, &[2.0], 8, 0).unwrap() - 9.0).abs() < 1e-2);
        let two_d = IntegrandF::catalog("quadratic").unwrap().with_dims(1, 2);
        assert!(matches!(
            cof_hom_single_cell(&two_d, &[0.0, 0.0], 4, 0),
            Err(Error::UnsupportedDimension { .. })
        ));
    }

    #[test]
    fn periodic_extension_tiles() {
        let v = vec![1.0, 2.0];
        assert_eq!(periodic_extension(&v, 1, 1, 2, 6), vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let v2 = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(
            periodic_extension(&v2, 2, 1, 2, 4),
            vec![1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0, 1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]
        );
    }

    #[test]
    fn two_dimensional_cell_problem() {
        let f = IntegrandF::new("wq2", 3.0, 2.0, |y, xi| (2.0 + (2.0 * PI * y[0]).sin()) * xi[0] * xi[0])
            .with_dims(2, 1);
        let prob = CellProblem::new(f, vec![1.0], 1, 16).unwrap();
        assert_eq!(prob.n_subcells(), 256);
        // layered in y0 only: same harmonic-mean value
        let v = cell_infimum(&prob, 2).unwrap();
        assert!((v - 3f64.sqrt()).abs() < 2e-3, "{v}");
    }
}
