//! Atomic two-scale Young measures: a finite probability measure on the state
//! space for every (macro cell, cell-variable cell) pair, plus the standard
//! constructions on them and a checker for the three characterization
//! conditions (moment bound, barycenter structure, Jensen-type inequality).

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;

use crate::cellhom::{cof_hom_single_cell_with, CellSolver};
use crate::error::{Error, Result};
use crate::integrands::{IntegrandF, DEFAULT_WINDOW};
use crate::lattice::{GridField, GridSpec, TwoScaleField};
use crate::numerics::pairwise_sum;

pub const WEIGHT_TOL: f64 = 1e-12;

/// `ν_(x,y) = Σ_k w_k(x,y) δ_{ξ_k(x,y)}` with a fixed number of atoms per cell.
///
/// Cells are indexed `c = i · n_cell + j` with `i` the macro cell and `j` the
/// cell-variable cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomicYoungMeasure {
    spec: GridSpec,
    atoms_per_cell: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
    window: (f64, f64),
}

impl AtomicYoungMeasure {
    /// Validated constructor.
    pub fn new(spec: GridSpec, atoms_per_cell: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let nu = Self::from_raw(spec, atoms_per_cell, atoms, weights)?;
        nu.validate()?;
        Ok(nu)
    }

    /// Shape-checked but otherwise unvalidated constructor, for measures read
    /// from disk that the checker must be able to reject with a diagnostic.
    pub fn from_raw(spec: GridSpec, atoms_per_cell: usize, atoms: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if atoms_per_cell == 0 {
            return Err(Error::InvalidArgument("need at least one atom per cell".into()));
        }
        let cells = spec.n_macro_cells() * spec.n_cell_cells();
        if weights.len() != cells * atoms_per_cell || atoms.len() != weights.len() * spec.dim_state {
            return Err(Error::InvalidArgument(format!(
                "measure arrays do not match {cells} cells x {atoms_per_cell} atoms"
            )));
        }
        let window = covering_window(&atoms);
        Ok(AtomicYoungMeasure {
            spec,
            atoms_per_cell,
            atoms,
            weights,
            window,
        })
    }

    pub fn with_window(mut self, lo: f64, hi: f64) -> Self {
        self.window = (lo, hi);
        self
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn atoms_per_cell(&self) -> usize {
        self.atoms_per_cell
    }

    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    pub fn n_cells(&self) -> usize {
        self.spec.n_macro_cells() * self.spec.n_cell_cells()
    }

    pub fn cell_index(&self, x_cell: usize, y_cell: usize) -> usize {
        x_cell * self.spec.n_cell_cells() + y_cell
    }

    pub fn atom(&self, cell: usize, k: usize) -> &[f64] {
        let d = self.spec.dim_state;
        let idx = cell * self.atoms_per_cell + k;
        &self.atoms[idx * d..(idx + 1) * d]
    }

    pub fn weight(&self, cell: usize, k: usize) -> f64 {
        self.weights[cell * self.atoms_per_cell + k]
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Probability and window invariants, reporting the first failing cell.
    pub fn validate(&self) -> Result<()> {
        let n_cell = self.spec.n_cell_cells();
        let width = self.window.1 - self.window.0;
        let slack = 1e-12 * width.max(1.0);
        for c in 0..self.n_cells() {
            let (x_cell, y_cell) = (c / n_cell, c % n_cell);
            let ws = &self.weights[c * self.atoms_per_cell..(c + 1) * self.atoms_per_cell];
            if let Some(w) = ws.iter().find(|w| !(w.is_finite() && **w >= 0.0)) {
                return Err(Error::InvalidMeasure {
                    x_cell,
                    y_cell,
                    reason: format!("negative or non-finite weight {w}"),
                });
            }
            let total = ws.iter().sum::<f64>();
            if (total - 1.0).abs() > WEIGHT_TOL {
                return Err(Error::InvalidMeasure {
                    x_cell,
                    y_cell,
                    reason: format!("weights sum to {total}, not 1"),
                });
            }
            for k in 0..self.atoms_per_cell {
                for &a in self.atom(c, k) {
                    if !a.is_finite() || a < self.window.0 - slack || a > self.window.1 + slack {
                        return Err(Error::InvalidMeasure {
                            x_cell,
                            y_cell,
                            reason: format!("atom {a} outside the state window {:?}", self.window),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// Sorted, merged `(atom, weight)` list of one cell with zero weights dropped.
    pub fn canonical_cell(&self, cell: usize, merge_tol: f64) -> Vec<(Vec<f64>, f64)> {
        let list: Vec<(Vec<f64>, f64)> = (0..self.atoms_per_cell)
            .map(|k| (self.atom(cell, k).to_vec(), self.weight(cell, k)))
            .collect();
        merge_atoms(list, merge_tol)
    }

    /// Whether the per-y-cell atom lists agree across all macro cells.
    pub fn is_homogeneous(&self) -> bool {
        let n_cell = self.spec.n_cell_cells();
        for j in 0..n_cell {
            let reference = self.canonical_cell(j, 0.0);
            for i in 1..self.spec.n_macro_cells() {
                let other = self.canonical_cell(self.cell_index(i, j), 0.0);
                if other.len() != reference.len() {
                    return false;
                }
                for ((a, wa), (b, wb)) in reference.iter().zip(&other) {
                    if (wa - wb).abs() > WEIGHT_TOL || a.iter().zip(b).any(|(s, t)| (s - t).abs() > WEIGHT_TOL) {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Same measure with `k` atoms per cell, padding with zero-weight copies of
    /// the first atom.
    pub fn padded(&self, k: usize) -> AtomicYoungMeasure {
        if k <= self.atoms_per_cell {
            return self.clone();
        }
        let d = self.spec.dim_state;
        let mut atoms = Vec::with_capacity(self.n_cells() * k * d);
        let mut weights = Vec::with_capacity(self.n_cells() * k);
        for c in 0..self.n_cells() {
            for a in 0..self.atoms_per_cell {
                atoms.extend_from_slice(self.atom(c, a));
                weights.push(self.weight(c, a));
            }
            for _ in self.atoms_per_cell..k {
                atoms.extend_from_slice(self.atom(c, 0));
                weights.push(0.0);
            }
        }
        AtomicYoungMeasure {
            spec: self.spec.clone(),
            atoms_per_cell: k,
            atoms,
            weights,
            window: self.window,
        }
    }

    /// Builds a measure from per-cell atom lists of varying length.
    pub fn from_cell_lists(spec: GridSpec, lists: Vec<Vec<(Vec<f64>, f64)>>, window: (f64, f64)) -> Result<Self> {
        let k = lists.iter().map(|l| l.len()).max().unwrap_or(0).max(1);
        let d = spec.dim_state;
        let mut atoms = Vec::with_capacity(lists.len() * k * d);
        let mut weights = Vec::with_capacity(lists.len() * k);
        for list in &lists {
            let first = list.first().map(|(a, _)| a.clone()).unwrap_or_else(|| vec![0.0; d]);
            for (a, w) in list {
                atoms.extend_from_slice(a);
                weights.push(*w);
            }
            for _ in list.len()..k {
                atoms.extend_from_slice(&first);
                weights.push(0.0);
            }
        }
        Ok(Self::from_raw(spec, k, atoms, weights)?.with_window(window.0, window.1))
    }
}

fn covering_window(atoms: &[f64]) -> (f64, f64) {
    let lo = atoms.iter().cloned().fold(DEFAULT_WINDOW.0, f64::min);
    let hi = atoms.iter().cloned().fold(DEFAULT_WINDOW.1, f64::max);
    (lo, hi)
}

/// Sorts atoms lexicographically, drops zero weights and merges atoms closer
/// than `merge_tol` (sup norm) into their weighted mean.
pub fn merge_atoms(mut list: Vec<(Vec<f64>, f64)>, merge_tol: f64) -> Vec<(Vec<f64>, f64)> {
    list.retain(|(_, w)| *w > 0.0);
    list.sort_by(|(a, _), (b, _)| {
        a.iter()
            .zip(b)
            .map(|(s, t)| s.total_cmp(t))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut out: Vec<(Vec<f64>, f64)> = Vec::with_capacity(list.len());
    for (a, w) in list {
        if let Some((last, lw)) = out.last_mut() {
            let close = last.iter().zip(&a).all(|(s, t)| (s - t).abs() <= merge_tol);
            if close {
                let total = *lw + w;
                for (s, t) in last.iter_mut().zip(&a) {
                    *s = (*s * *lw + t * w) / total;
                }
                *lw = total;
                continue;
            }
        }
        out.push((a, w));
    }
    out
}

/// `ν_(x,y) = δ_{u₁(x,y)}`.
pub fn dirac_lift(u1: &TwoScaleField) -> AtomicYoungMeasure {
    let spec = u1.spec().clone();
    let cells = spec.n_macro_cells() * spec.n_cell_cells();
    AtomicYoungMeasure::from_raw(spec, 1, u1.values().to_vec(), vec![1.0; cells])
        .expect("two-scale field has the measure's shape")
}

/// `u₁(x,y) = Σ_k w_k ξ_k`.
pub fn barycenter(nu: &AtomicYoungMeasure) -> TwoScaleField {
    let d = nu.spec.dim_state;
    let mut values = Vec::with_capacity(nu.n_cells() * d);
    for c in 0..nu.n_cells() {
        for comp in 0..d {
            let terms: Vec<f64> = (0..nu.atoms_per_cell)
                .map(|k| nu.weight(c, k) * nu.atom(c, k)[comp])
                .collect();
            values.push(pairwise_sum(&terms));
        }
    }
    TwoScaleField::new(nu.spec.clone(), values).expect("barycenter of finite atoms is finite")
}

/// `u(x) = ∫_Q ∫ ξ dν_(x,y) dy`, the y-average of the barycenter.
pub fn underlying_deformation(nu: &AtomicYoungMeasure) -> GridField {
    y_average(&barycenter(nu))
}

/// y-average of a two-scale field.
pub fn y_average(u1: &TwoScaleField) -> GridField {
    let spec = u1.spec();
    let d = spec.dim_state;
    let n_cell = spec.n_cell_cells();
    let mut values = Vec::with_capacity(spec.n_macro_cells() * d);
    for i in 0..spec.n_macro_cells() {
        for comp in 0..d {
            let terms: Vec<f64> = (0..n_cell).map(|j| u1.value(i, j)[comp]).collect();
            values.push(pairwise_sum(&terms) / n_cell as f64);
        }
    }
    GridField::new(spec.clone(), values).expect("average of finite values is finite")
}

/// `∫_Ω ∫_Q ∫ |ξ|^p dν_(x,y) dy dx` with p from the grid spec.
pub fn p_moment(nu: &AtomicYoungMeasure) -> f64 {
    let p = nu.spec.p_exponent;
    let terms: Vec<f64> = (0..nu.n_cells())
        .map(|c| {
            (0..nu.atoms_per_cell)
                .map(|k| {
                    let r = nu.atom(c, k).iter().map(|a| a * a).sum::<f64>().sqrt();
                    nu.weight(c, k) * r.powf(p)
                })
                .sum::<f64>()
        })
        .collect();
    pairwise_sum(&terms) * nu.spec.macro_cell_volume() * nu.spec.cell_cell_volume()
}

/// Homogeneous measure `Σ_{a ∈ {0..T-1}^N} T^{-N} δ_{F + φ(a + y)}` generated by
/// the oscillation `F + φ(x/ε)` of a `(0,T)^N`-periodic profile φ.
pub fn periodic_shift_measure(
    phi: &dyn Fn(&[f64]) -> Vec<f64>,
    offset: &[f64],
    periods: usize,
    spec: &GridSpec,
    max_atoms: usize,
) -> Result<AtomicYoungMeasure> {
    if periods == 0 {
        return Err(Error::InvalidArgument("T must be at least 1".into()));
    }
    if offset.len() != spec.dim_state {
        return Err(Error::InvalidArgument("offset F has the wrong dimension".into()));
    }
    let n = spec.dim_macro;
    let count = periods.pow(n as u32);
    if count > max_atoms {
        return Err(Error::CapacityExceeded(format!(
            "T^N = {count} atoms exceed the capacity of {max_atoms}"
        )));
    }
    let shifts: Vec<Vec<f64>> = (0..count)
        .map(|idx| {
            let mut rest = idx;
            (0..n)
                .map(|_| {
                    let k = rest % periods;
                    rest /= periods;
                    k as f64
                })
                .collect()
        })
        .collect();
    let weight = 1.0 / count as f64;
    let ys = spec.cell_points();
    let mut per_y_atoms = Vec::with_capacity(ys.len());
    for y in ys.iter() {
        let mut cell = Vec::with_capacity(count * spec.dim_state);
        for a in &shifts {
            let arg: Vec<f64> = a.iter().zip(y).map(|(s, t)| s + t).collect();
            let v = phi(&arg);
            if v.len() != spec.dim_state {
                return Err(Error::InvalidArgument("φ returned the wrong state length".into()));
            }
            cell.extend(v.iter().zip(offset).map(|(s, f)| s + f));
        }
        per_y_atoms.push(cell);
    }
    let mut atoms = Vec::new();
    for _ in 0..spec.n_macro_cells() {
        for cell in &per_y_atoms {
            atoms.extend_from_slice(cell);
        }
    }
    let weights = vec![weight; spec.n_macro_cells() * spec.n_cell_cells() * count];
    AtomicYoungMeasure::new(spec.clone(), count, atoms, weights)
}

fn check_same_deformation(mu: &AtomicYoungMeasure, nu: &AtomicYoungMeasure, tol: f64) -> Result<()> {
    let du = underlying_deformation(mu);
    let dv = underlying_deformation(nu);
    for i in 0..du.len() {
        for (a, b) in du.value(i).iter().zip(dv.value(i)) {
            if (a - b).abs() > tol {
                return Err(Error::PreconditionViolation(format!(
                    "underlying deformations differ in macro cell {i}: {a} vs {b}"
                )));
            }
        }
    }
    Ok(())
}

/// `σ = μ` on `D × Q` and `ν` elsewhere; both must share the underlying deformation.
pub fn glue(mu: &AtomicYoungMeasure, nu: &AtomicYoungMeasure, region: &[usize]) -> Result<AtomicYoungMeasure> {
    if mu.spec != nu.spec {
        return Err(Error::InvalidArgument("glued measures must share a grid".into()));
    }
    mu.validate()?;
    nu.validate()?;
    check_same_deformation(mu, nu, 1e-9)?;
    let n_macro = mu.spec.n_macro_cells();
    let mut in_region = vec![false; n_macro];
    for &i in region {
        if i >= n_macro {
            return Err(Error::InvalidArgument(format!("macro cell {i} is out of range")));
        }
        in_region[i] = true;
    }
    let k = mu.atoms_per_cell.max(nu.atoms_per_cell);
    let mu = mu.padded(k);
    let nu = nu.padded(k);
    let d = mu.spec.dim_state;
    let n_cell = mu.spec.n_cell_cells();
    let mut atoms = Vec::with_capacity(mu.atoms.len());
    let mut weights = Vec::with_capacity(mu.weights.len());
    for i in 0..n_macro {
        let src = if in_region[i] { &mu } else { &nu };
        let lo = i * n_cell * k;
        let hi = (i + 1) * n_cell * k;
        atoms.extend_from_slice(&src.atoms[lo * d..hi * d]);
        weights.extend_from_slice(&src.weights[lo..hi]);
    }
    let window = (mu.window.0.min(nu.window.0), mu.window.1.max(nu.window.1));
    Ok(AtomicYoungMeasure::from_raw(mu.spec.clone(), k, atoms, weights)?.with_window(window.0, window.1))
}

/// Default atom merging tolerance: `1e-9 ·` window width.
pub fn default_merge_tol(nu: &AtomicYoungMeasure) -> f64 {
    1e-9 * (nu.window.1 - nu.window.0)
}

/// `ν̄_y = ⨍_Ω ν_(x,y) dx`, returned as a homogeneous measure on the same grid.
pub fn average_over_x(nu: &AtomicYoungMeasure) -> AtomicYoungMeasure {
    average_over_x_with_tol(nu, default_merge_tol(nu))
}

pub fn average_over_x_with_tol(nu: &AtomicYoungMeasure, merge_tol: f64) -> AtomicYoungMeasure {
    let n_macro = nu.spec.n_macro_cells();
    let n_cell = nu.spec.n_cell_cells();
    let scale = 1.0 / n_macro as f64;
    let per_y: Vec<Vec<(Vec<f64>, f64)>> = (0..n_cell)
        .map(|j| {
            let mut list = Vec::with_capacity(n_macro * nu.atoms_per_cell);
            for i in 0..n_macro {
                let c = nu.cell_index(i, j);
                for k in 0..nu.atoms_per_cell {
                    list.push((nu.atom(c, k).to_vec(), nu.weight(c, k) * scale));
                }
            }
            let mut merged = merge_atoms(list, merge_tol);
            // restore exact normalization lost to the 1/n_macro scaling
            let total: f64 = merged.iter().map(|(_, w)| w).sum();
            if total > 0.0 {
                merged.iter_mut().for_each(|(_, w)| *w /= total);
            }
            merged
        })
        .collect();
    let lists: Vec<Vec<(Vec<f64>, f64)>> = (0..n_macro).flat_map(|_| per_y.iter().cloned()).collect();
    AtomicYoungMeasure::from_cell_lists(nu.spec.clone(), lists, nu.window).expect("shape is consistent")
}

/// `t ν + (1 − t) μ` for homogeneous measures with equal underlying
/// deformation, realized as the x-average of the measure glued along the slab
/// `{x₀ < lo₀ + t (hi₀ − lo₀)}`.
pub fn convex_combination(nu: &AtomicYoungMeasure, mu: &AtomicYoungMeasure, t: f64) -> Result<AtomicYoungMeasure> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("t = {t} must lie in (0, 1)")));
    }
    if nu.spec != mu.spec {
        return Err(Error::InvalidArgument("measures must share a grid".into()));
    }
    if !nu.is_homogeneous() || !mu.is_homogeneous() {
        return Err(Error::PreconditionViolation("convex combination needs homogeneous measures".into()));
    }
    check_same_deformation(nu, mu, 1e-9)?;
    let spec = &nu.spec;
    let slab_cells = t * spec.n_x as f64;
    if (slab_cells - slab_cells.round()).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "slab fraction t = {t} is not commensurable with n_x = {}",
            spec.n_x
        )));
    }
    let cut = slab_cells.round() as usize;
    let region: Vec<usize> = (0..spec.n_macro_cells()).filter(|i| i % spec.n_x < cut).collect();
    let glued = glue(nu, mu, &region)?;
    Ok(average_over_x(&glued))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Consistent,
    Violated,
}

impl Verdict {
    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Consistent => "consistent",
            Verdict::Violated => "violated",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JensenGap {
    pub label: String,
    pub worst_cell: usize,
    /// `min_x [∫_Q ∫ f dν_(x,y) dy − f_hom(u(x))]`.
    pub gap: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CharacterizationReport {
    pub p_moment: f64,
    pub barycenter_field: Option<TwoScaleField>,
    pub deformation: Option<GridField>,
    pub jensen_gaps: Vec<JensenGap>,
    pub verdict: Verdict,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct CharacterizeOptions {
    /// A gap is a violation when below `-gap_rel_tol · (1 + |f_hom|)`.
    pub gap_rel_tol: f64,
    /// Subcells for the single-cell formula; defaults to the measure's n_y.
    pub subcells: Option<usize>,
    pub seed: u64,
    /// Deformation the measure claims to have, checked against its barycenter.
    pub expected_deformation: Option<GridField>,
    pub deformation_tol: f64,
    pub solver: CellSolver,
}

impl Default for CharacterizeOptions {
    fn default() -> Self {
        CharacterizeOptions {
            gap_rel_tol: 1e-2,
            subcells: None,
            seed: 0,
            expected_deformation: None,
            deformation_tol: 1e-9,
            solver: CellSolver::default(),
        }
    }
}

/// Checks the moment condition, the barycenter structure and, per battery
/// member and macro cell, `∫_Q ∫ f(y, ξ) dν_(x,y) dy ≥ f_hom(u(x))`.
///
/// One-sided: "consistent" only means no battery member refuted the measure.
pub fn characterize(
    nu: &AtomicYoungMeasure,
    battery: &[IntegrandF],
    options: &CharacterizeOptions,
) -> Result<CharacterizationReport> {
    if battery.is_empty() {
        return Err(Error::InvalidArgument("characterization needs a nonempty battery".into()));
    }
    let mut diagnostics = Vec::new();
    if let Err(e) = nu.validate() {
        diagnostics.push(format!("not a family of probability measures: {e}"));
        return Ok(CharacterizationReport {
            p_moment: f64::NAN,
            barycenter_field: None,
            deformation: None,
            jensen_gaps: Vec::new(),
            verdict: Verdict::Violated,
            diagnostics,
        });
    }
    let spec = nu.spec();
    let moment = p_moment(nu);
    let mut violated = false;
    if !moment.is_finite() {
        violated = true;
        diagnostics.push(format!("p-moment is not finite ({moment})"));
    }
    let bar = barycenter(nu);
    let deformation = y_average(&bar);
    if let Some(expected) = &options.expected_deformation {
        if expected.spec() != spec {
            return Err(Error::InvalidArgument("expected deformation lives on another grid".into()));
        }
        for i in 0..deformation.len() {
            let off = deformation
                .value(i)
                .iter()
                .zip(expected.value(i))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if off > options.deformation_tol {
                violated = true;
                diagnostics.push(format!(
                    "barycenter check failed in macro cell {i}: deformation {:?} differs from the expected {:?} by {off}",
                    deformation.value(i),
                    expected.value(i)
                ));
                break;
            }
        }
    }

    let m = options.subcells.unwrap_or(spec.n_y);
    let ys = spec.cell_points();
    let n_cell = spec.n_cell_cells();
    let mut gaps = Vec::with_capacity(battery.len());
    for f in battery {
        // f_hom per distinct deformation value
        let mut distinct: Vec<Vec<f64>> = Vec::new();
        let mut key_of = Vec::with_capacity(deformation.len());
        let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
        for i in 0..deformation.len() {
            let u = deformation.value(i);
            let key: Vec<u64> = u.iter().map(|v| v.to_bits()).collect();
            let idx = *seen.entry(key).or_insert_with(|| {
                distinct.push(u.to_vec());
                distinct.len() - 1
            });
            key_of.push(idx);
        }
        let f_hom: Vec<f64> = distinct
            .par_iter()
            .map(|u| cof_hom_single_cell_with(&options.solver, f, u, m, options.seed))
            .collect::<Result<_>>()?;
        let mut worst = (0usize, f64::INFINITY, 0.0);
        for i in 0..deformation.len() {
            let terms: Vec<f64> = (0..n_cell)
                .map(|j| {
                    let c = nu.cell_index(i, j);
                    (0..nu.atoms_per_cell())
                        .map(|k| nu.weight(c, k) * f.eval(ys.get(j), nu.atom(c, k)))
                        .sum::<f64>()
                })
                .collect();
            let measure_side = pairwise_sum(&terms) / n_cell as f64;
            let fh = f_hom[key_of[i]];
            let gap = measure_side - fh;
            let tol = options.gap_rel_tol * (1.0 + fh.abs());
            if gap < worst.1 {
                worst = (i, gap, tol);
            }
        }
        if worst.1 < -worst.2 {
            violated = true;
            diagnostics.push(format!(
                "Jensen-type inequality fails for {} in macro cell {}: gap {:.6e} below -{:.3e}",
                f.label, worst.0, worst.1, worst.2
            ));
        }
        gaps.push(JensenGap {
            label: f.label.clone(),
            worst_cell: worst.0,
            gap: worst.1,
            tolerance: worst.2,
        });
    }
    Ok(CharacterizationReport {
        p_moment: moment,
        barycenter_field: Some(bar),
        deformation: Some(deformation),
        jensen_gaps: gaps,
        verdict: if violated { Verdict::Violated } else { Verdict::Consistent },
        diagnostics,
    })
}

/// The convex members of the local catalog, used as the default battery.
pub fn standard_battery() -> Vec<IntegrandF> {
    ["quadratic", "weighted_quadratic", "double_well", "tilted_weighted"]
        .iter()
        .map(|n| IntegrandF::catalog(n).expect("catalog entry"))
        .collect()
}

pub const CSV_HEADER_PREFIX: &str = "x_cell,y_cell,k";

/// Columnar CSV: `x_cell,y_cell,k,atom_0..atom_{d-1},weight`, LF line endings,
/// 17 significant digits (lossless for f64).
pub fn to_csv(nu: &AtomicYoungMeasure) -> String {
    let d = nu.spec.dim_state;
    let mut out = String::from(CSV_HEADER_PREFIX);
    for c in 0..d {
        let _ = write!(out, ",atom_{c}");
    }
    out.push_str(",weight\n");
    let n_cell = nu.spec.n_cell_cells();
    for c in 0..nu.n_cells() {
        for k in 0..nu.atoms_per_cell {
            let _ = write!(out, "{},{},{}", c / n_cell, c % n_cell, k);
            for a in nu.atom(c, k) {
                let _ = write!(out, ",{a:.16e}");
            }
            let _ = writeln!(out, ",{:.16e}", nu.weight(c, k));
        }
    }
    out
}

/// Inverse of [`to_csv`] on the given grid. The result is shape-checked but not
/// validated, so that invalid measures can be handed to the checker.
pub fn from_csv(spec: &GridSpec, text: &str) -> Result<AtomicYoungMeasure> {
    let d = spec.dim_state;
    let n_cell = spec.n_cell_cells();
    let cells = spec.n_macro_cells() * n_cell;
    let mut lines = text.lines().enumerate();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty measure file".into()))?
        .1;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    if cols.len() != 4 + d || cols[..3] != ["x_cell", "y_cell", "k"] || cols[3 + d] != "weight" {
        return Err(Error::InvalidArgument(format!(
            "measure header must be '{CSV_HEADER_PREFIX},atom_0..,weight' with {d} atom columns"
        )));
    }
    let mut rows: Vec<(usize, usize, Vec<f64>, f64)> = Vec::new();
    let mut k_max = 0;
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let err = |what: &str| Error::InvalidArgument(format!("line {}: {what}", lineno + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 + d {
            return Err(err("wrong number of columns"));
        }
        let xc: usize = fields[0].parse().map_err(|_| err("bad x_cell"))?;
        let yc: usize = fields[1].parse().map_err(|_| err("bad y_cell"))?;
        let k: usize = fields[2].parse().map_err(|_| err("bad k"))?;
        if xc >= spec.n_macro_cells() || yc >= n_cell {
            return Err(err("cell index out of range"));
        }
        let atom = fields[3..3 + d]
            .iter()
            .map(|s| s.parse::<f64>().map_err(|_| err("bad atom value")))
            .collect::<Result<Vec<_>>>()?;
        let w: f64 = fields[3 + d].parse().map_err(|_| err("bad weight"))?;
        k_max = k_max.max(k + 1);
        rows.push((xc * n_cell + yc, k, atom, w));
    }
    if k_max == 0 {
        return Err(Error::InvalidArgument("measure file has no rows".into()));
    }
    let mut atoms = vec![f64::NAN; cells * k_max * d];
    let mut weights = vec![f64::NAN; cells * k_max];
    for (c, k, atom, w) in rows {
        let idx = c * k_max + k;
        if !weights[idx].is_nan() {
            return Err(Error::InvalidArgument(format!("duplicate row for cell {c}, atom {k}")));
        }
        atoms[idx * d..(idx + 1) * d].copy_from_slice(&atom);
        weights[idx] = w;
    }
    if let Some(idx) = weights.iter().position(|w| w.is_nan()) {
        let c = idx / k_max;
        return Err(Error::InvalidArgument(format!(
            "missing row for x_cell {}, y_cell {}, k {}",
            c / n_cell,
            c % n_cell,
            idx % k_max
        )));
    }
    AtomicYoungMeasure::from_raw(spec.clone(), k_max, atoms, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn spec(n_x: usize, n_y: usize) -> GridSpec {
        GridSpec::unit_1d(n_x, n_y).unwrap()
    }

    fn two_atoms(spec: &GridSpec, a: f64, b: f64, wa: f64) -> AtomicYoungMeasure {
        let cells = spec.n_macro_cells() * spec.n_cell_cells();
        let atoms = [a, b].repeat(cells);
        let weights = [wa, 1.0 - wa].repeat(cells);
        AtomicYoungMeasure::new(spec.clone(), 2, atoms, weights).unwrap()
    }

    fn dirac_const(spec: &GridSpec, c: f64) -> AtomicYoungMeasure {
        dirac_lift(&TwoScaleField::from_fn(spec.clone(), |_, _| vec![c]).unwrap())
    }

    #[test]
    fn dirac_lift_examples() {
        let s = spec(4, 8);
        let zero = dirac_const(&s, 0.0);
        assert_eq!(zero.atoms_per_cell(), 1);
        assert!(zero.atoms().iter().all(|&a| a == 0.0));

        let u1 = TwoScaleField::from_fn(s.clone(), |_, y| vec![(2.0 * PI * y[0]).sin()]).unwrap();
        let nu = dirac_lift(&u1);
        assert_eq!(barycenter(&nu), u1);
        // midpoint rule over a full period with even n_y
        let u = underlying_deformation(&nu);
        assert!(u.values().iter().all(|v| v.abs() < 1e-12));
        assert!((p_moment(&nu) - 0.5).abs() < 1e-3);

        let lin = dirac_lift(&TwoScaleField::from_fn(s.clone(), |x, _| vec![x[0]]).unwrap());
        let u = underlying_deformation(&lin);
        for i in 0..4 {
            assert!((u.value(i)[0] - (i as f64 + 0.5) / 4.0).abs() < 1e-15);
        }
        let c = underlying_deformation(&dirac_const(&s, 1.7));
        assert!(c.values().iter().all(|v| (v - 1.7).abs() < 1e-15));
    }

    #[test]
    fn barycenter_and_moment_examples() {
        let s = spec(2, 2);
        let pm = two_atoms(&s, -1.0, 1.0, 0.5);
        assert!(barycenter(&pm).values().iter().all(|&v| v == 0.0));
        assert!(underlying_deformation(&pm).values().iter().all(|&v| v == 0.0));
        assert!((p_moment(&pm) - 1.0).abs() < 1e-15);
        let skew = two_atoms(&s, 0.0, 4.0, 0.25);
        assert!(barycenter(&skew).values().iter().all(|&v| v == 3.0));
        assert_eq!(p_moment(&dirac_const(&s, 0.0)), 0.0);
    }

    #[test]
    fn validation_names_the_cell() {
        let s = spec(2, 2);
        let atoms = vec![0.0; 4];
        let mut weights = vec![1.0; 4];
        weights[3] = 0.5;
        let err = AtomicYoungMeasure::new(s.clone(), 1, atoms.clone(), weights).unwrap_err();
        assert_eq!(
            err,
            Error::InvalidMeasure { x_cell: 1, y_cell: 1, reason: "weights sum to 0.5, not 1".into() }
        );
        let err = AtomicYoungMeasure::new(s.clone(), 1, atoms, vec![1.0, -0.0, 1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::InvalidMeasure { x_cell: 0, y_cell: 1, .. }));
        let out = AtomicYoungMeasure::new(s, 1, vec![0.0, 0.0, 0.0, 9.0], vec![1.0; 4]).unwrap().with_window(-4.0, 4.0);
        assert!(out.validate().is_err());
    }

    #[test]
    fn periodic_shift_examples() {
        let s = spec(2, 4);
        let phi = |y: &[f64]| vec![(2.0 * PI * y[0]).sin()];
        let t1 = periodic_shift_measure(&phi, &[0.5], 1, &s, 8).unwrap();
        assert_eq!(t1.atoms_per_cell(), 1);
        for j in 0..4 {
            let y = (j as f64 + 0.5) / 4.0;
            assert!((t1.atom(j, 0)[0] - (0.5 + (2.0 * PI * y).sin())).abs() < 1e-15);
        }

        let zero = |_: &[f64]| vec![0.0];
        let flat = periodic_shift_measure(&zero, &[1.25], 3, &s, 8).unwrap();
        assert!(flat.atoms().iter().all(|&a| a == 1.25));
        assert!(underlying_deformation(&flat).values().iter().all(|&v| v == 1.25));

        // square wave of period 2: atoms {φ(y), φ(1 + y)} = {1, -1}
        let square = |y: &[f64]| vec![if y[0].rem_euclid(2.0) < 1.0 { 1.0 } else { -1.0 }];
        let sq = periodic_shift_measure(&square, &[0.0], 2, &s, 8).unwrap();
        for c in 0..sq.n_cells() {
            assert_eq!(sq.atom(c, 0), &[1.0]);
            assert_eq!(sq.atom(c, 1), &[-1.0]);
            assert_eq!(sq.weight(c, 0), 0.5);
        }
        assert!(underlying_deformation(&sq).values().iter().all(|&v| v == 0.0));
        assert!(sq.is_homogeneous());
        assert!(matches!(
            periodic_shift_measure(&square, &[0.0], 3, &s, 2),
            Err(Error::CapacityExceeded(_))
        ));
    }

    #[test]
    fn glue_examples() {
        let s = spec(4, 2);
        let mu = two_atoms(&s, -1.0, 1.0, 0.5);
        let nu = dirac_const(&s, 0.0);
        let all: Vec<usize> = (0..4).collect();
        assert_eq!(glue(&mu, &nu, &all).unwrap(), mu);
        assert_eq!(glue(&mu, &nu, &[]).unwrap(), nu.padded(2));
        let half = glue(&mu, &nu, &[0, 1]).unwrap();
        assert!(underlying_deformation(&half).values().iter().all(|&v| v == 0.0));
        assert!((p_moment(&half) - 0.5).abs() < 1e-15);
        half.validate().unwrap();

        let shifted = dirac_const(&s, 0.5);
        assert!(matches!(glue(&mu, &shifted, &[0]), Err(Error::PreconditionViolation(_))));
    }

    #[test]
    fn average_examples() {
        let s = spec(4, 2);
        let hom = two_atoms(&s, -1.0, 1.0, 0.5);
        let avg = average_over_x(&hom);
        for c in 0..hom.n_cells() {
            assert_eq!(avg.canonical_cell(c, 0.0), hom.canonical_cell(c, 0.0));
        }

        let glued = glue(&hom, &dirac_const(&s, 0.0), &[0, 1]).unwrap();
        let avg = average_over_x(&glued);
        assert!(avg.is_homogeneous());
        let cell = avg.canonical_cell(0, 0.0);
        assert_eq!(cell, vec![(vec![-1.0], 0.25), (vec![0.0], 0.5), (vec![1.0], 0.25)]);
        assert!((p_moment(&avg) - p_moment(&glued)).abs() < 1e-15);

        let s2 = spec(2, 4);
        let lin = dirac_lift(&TwoScaleField::from_fn(s2, |x, _| vec![x[0]]).unwrap());
        let avg = average_over_x(&lin);
        assert_eq!(avg.canonical_cell(3, 0.0), vec![(vec![0.25], 0.5), (vec![0.75], 0.5)]);
    }

    #[test]
    fn convex_combination_examples() {
        let s = spec(8, 2);
        let pm = two_atoms(&s, -1.0, 1.0, 0.5);
        let same = convex_combination(&pm, &pm, 0.5).unwrap();
        for c in 0..pm.n_cells() {
            assert_eq!(same.canonical_cell(c, 0.0), pm.canonical_cell(c, 0.0));
        }

        let up = dirac_const(&s, 1.0);
        let down = dirac_const(&s, -1.0);
        assert!(matches!(convex_combination(&up, &down, 0.5), Err(Error::PreconditionViolation(_))));

        let mix = convex_combination(&pm, &dirac_const(&s, 0.0), 0.25).unwrap();
        let cell = mix.canonical_cell(5, 0.0);
        assert_eq!(cell, vec![(vec![-1.0], 0.125), (vec![0.0], 0.75), (vec![1.0], 0.125)]);
        assert!(convex_combination(&pm, &pm, 0.3).is_err());
    }

    #[test]
    fn characterize_examples() {
        let s = spec(2, 16);
        let opts = CharacterizeOptions::default();
        let quad = IntegrandF::catalog("quadratic").unwrap();
        let rep = characterize(&dirac_const(&s, 0.7), std::slice::from_ref(&quad), &opts).unwrap();
        assert_eq!(rep.verdict, Verdict::Consistent);
        assert!(rep.jensen_gaps[0].gap.abs() < 1e-9);

        let dw = IntegrandF::catalog("double_well").unwrap();
        let rep = characterize(&two_atoms(&s, -1.0, 1.0, 0.5), &[dw], &opts).unwrap();
        assert_eq!(rep.verdict, Verdict::Consistent);
        assert!(rep.jensen_gaps[0].gap.abs() < 1e-3);

        let cells = s.n_macro_cells() * s.n_cell_cells();
        let mut weights = vec![1.0; cells];
        weights[5] = 0.5;
        let bad = AtomicYoungMeasure::from_raw(s.clone(), 1, vec![0.0; cells], weights).unwrap();
        let rep = characterize(&bad, std::slice::from_ref(&quad), &opts).unwrap();
        assert_eq!(rep.verdict, Verdict::Violated);
        assert!(rep.jensen_gaps.is_empty());
        assert!(rep.diagnostics[0].contains("macro cell 0, cell-variable cell 5"), "{:?}", rep.diagnostics);

        let concave = IntegrandF::catalog("concave_window").unwrap();
        let rep = characterize(&dirac_const(&s, 0.0), std::slice::from_ref(&concave), &opts).unwrap();
        assert_eq!(rep.verdict, Verdict::Consistent);
        assert!((rep.jensen_gaps[0].gap - 4.0).abs() < 1e-6);

        assert!(characterize(&dirac_const(&s, 0.0), &[], &opts).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let s = spec(2, 3);
        let u1 = TwoScaleField::from_fn(s.clone(), |x, y| vec![x[0] / 3.0 + (2.0 * PI * y[0]).cos()]).unwrap();
        let nu = glue(&dirac_lift(&u1), &dirac_lift(&u1), &[1]).unwrap();
        let text = to_csv(&nu);
        assert!(text.starts_with("x_cell,y_cell,k,atom_0,weight\n"));
        let back = from_csv(&s, &text).unwrap();
        assert_eq!(back.atoms(), nu.atoms());
        assert_eq!(back.weights(), nu.weights());
        let truncated: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
        assert!(from_csv(&s, &truncated).unwrap_err().to_string().contains("missing row"));
    }
}
