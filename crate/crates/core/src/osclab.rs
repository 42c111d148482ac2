//! Oscillating sequences `n ↦ u_n` and empirical tests of what they generate:
//! pairings `∫ z(x) ψ(⟨x/ε_n⟩, u_n(x)) dx` against measure pairings, two-scale
//! convergence pairings and the product structure of joint pairings.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::lattice::{fold_scalar, GridField, GridSpec, TwoScaleField};
use crate::numerics::{linear_slope, pairwise_sum};
use crate::ymeasure::AtomicYoungMeasure;

pub type Sampler = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;
pub type PointSequence = Arc<dyn Fn(&[f64], f64) -> Vec<f64> + Send + Sync>;
pub type MacroFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type CellStateFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// Grid cells required per oscillation period.
pub const MIN_CELLS_PER_PERIOD: f64 = 8.0;

#[derive(Clone)]
pub enum SequenceKind {
    /// `u_n(x) = F + φ(x / ε_n)` with φ periodic.
    PeriodicShift { phi: Sampler, offset: Vec<f64> },
    /// Tiles of side `ρ_n = ε_n ⌊1/√ε_n⌋` filled with rescaled copies of an
    /// inner sequence on the unit cube at scale `ε_n / ρ_n`, and `F` on the
    /// leftover set.
    AveragingTiles { inner: Box<SequenceKind>, offset: Vec<f64> },
    /// `u_n(x) = g(x, ε_n)`.
    Custom { sampler: PointSequence },
}

impl fmt::Debug for SequenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SequenceKind::PeriodicShift { offset, .. } => write!(f, "PeriodicShift(F = {offset:?})"),
            SequenceKind::AveragingTiles { inner, offset } => {
                write!(f, "AveragingTiles(inner = {inner:?}, F = {offset:?})")
            }
            SequenceKind::Custom { .. } => write!(f, "Custom"),
        }
    }
}

/// `ρ = ε ⌊1/√ε⌋`.
pub fn tile_side(eps: f64) -> f64 {
    eps * (1.0 / eps.sqrt()).floor()
}

impl SequenceKind {
    pub fn periodic_shift(phi: impl Fn(&[f64]) -> Vec<f64> + Send + Sync + 'static, offset: Vec<f64>) -> Self {
        SequenceKind::PeriodicShift {
            phi: Arc::new(phi),
            offset,
        }
    }

    pub fn custom(sampler: impl Fn(&[f64], f64) -> Vec<f64> + Send + Sync + 'static) -> Self {
        SequenceKind::Custom {
            sampler: Arc::new(sampler),
        }
    }

    pub fn averaging_tiles(inner: SequenceKind, offset: Vec<f64>) -> Self {
        SequenceKind::AveragingTiles {
            inner: Box::new(inner),
            offset,
        }
    }

    /// Value of the sequence member at scale `eps` at the point `x` of the box `[lo, hi]`.
    pub fn sample(&self, x: &[f64], eps: f64, lo: &[f64], hi: &[f64]) -> Result<Vec<f64>> {
        match self {
            SequenceKind::PeriodicShift { phi, offset } => {
                let arg: Vec<f64> = x.iter().map(|t| t / eps).collect();
                Ok(phi(&arg).iter().zip(offset).map(|(a, b)| a + b).collect())
            }
            SequenceKind::Custom { sampler } => Ok(sampler(x, eps)),
            SequenceKind::AveragingTiles { inner, offset } => {
                let rho = tile_side(eps);
                if !(rho > 0.0) {
                    return Err(Error::InvalidSchedule(format!(
                        "tile side ρ = ε⌊1/√ε⌋ vanishes at ε = {eps}"
                    )));
                }
                // tile corner a ∈ ρ Z^N with a + ρ Q inside the box
                let mut local = Vec::with_capacity(x.len());
                for (axis, &xa) in x.iter().enumerate() {
                    let k = (xa / rho).floor();
                    let a = k * rho;
                    let tol = 1e-12 * rho;
                    if a < lo[axis] - tol || a + rho > hi[axis] + tol {
                        return Ok(offset.clone());
                    }
                    local.push(((xa - a) / rho).clamp(0.0, 1.0));
                }
                let unit_lo = vec![0.0; x.len()];
                let unit_hi = vec![1.0; x.len()];
                inner.sample(&local, eps / rho, &unit_lo, &unit_hi)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct OscillationSequence {
    pub kind: SequenceKind,
    pub eps_schedule: Vec<f64>,
    pub spec: GridSpec,
}

impl OscillationSequence {
    pub fn new(kind: SequenceKind, eps_schedule: Vec<f64>, spec: GridSpec) -> Result<Self> {
        if eps_schedule.is_empty() {
            return Err(Error::InvalidSchedule("ε schedule is empty".into()));
        }
        if eps_schedule.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::InvalidSchedule("ε values must be positive and finite".into()));
        }
        if eps_schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule("ε schedule must be strictly decreasing".into()));
        }
        Ok(OscillationSequence {
            kind,
            eps_schedule,
            spec,
        })
    }

    pub fn len(&self) -> usize {
        self.eps_schedule.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eps_schedule.is_empty()
    }

    /// Refuses schedules the grid cannot resolve; see [`check_schedule_resolution`].
    pub fn check_resolution(&self) -> Result<()> {
        check_schedule_resolution(&self.spec, &self.eps_schedule)
    }

    /// The n-th member sampled at the macro midpoints.
    pub fn realize(&self, n: usize) -> Result<GridField> {
        let eps = *self
            .eps_schedule
            .get(n)
            .ok_or_else(|| Error::InvalidArgument(format!("index {n} outside the schedule")))?;
        let xs = self.spec.macro_points();
        let values: Vec<Vec<f64>> = (0..xs.len())
            .into_par_iter()
            .map(|i| self.kind.sample(xs.get(i), eps, &self.spec.omega_lo, &self.spec.omega_hi))
            .collect::<Result<_>>()?;
        GridField::new(self.spec.clone(), values.concat())
    }
}

/// Every ε must be an integer multiple of the grid step, with the box corner on
/// the ε-lattice, and span at least [`MIN_CELLS_PER_PERIOD`] cells.
pub fn check_schedule_resolution(spec: &GridSpec, eps_schedule: &[f64]) -> Result<()> {
    for &eps in eps_schedule {
        for axis in 0..spec.dim_macro {
            let cells = eps / spec.macro_step(axis);
            let corner = spec.omega_lo[axis] / eps;
            if (cells - cells.round()).abs() > 1e-9 || (corner - corner.round()).abs() > 1e-9 {
                return Err(Error::Refused(format!(
                    "ε = {eps} is not commensurable with the grid on axis {axis}"
                )));
            }
            if cells.round() < MIN_CELLS_PER_PERIOD {
                return Err(Error::Refused(format!(
                    "grid under-resolves ε = {eps}: {} cells per period, need at least {MIN_CELLS_PER_PERIOD}",
                    cells.round()
                )));
            }
        }
    }
    Ok(())
}

/// `∫_Ω z(x) ψ(⟨x/ε⟩, u(x)) dx` by the midpoint rule.
pub fn empirical_pairing(u: &GridField, eps: f64, z: &dyn Fn(&[f64]) -> f64, psi: &dyn Fn(&[f64], &[f64]) -> f64) -> f64 {
    let spec = u.spec();
    let xs = spec.macro_points();
    let terms: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let y: Vec<f64> = x.iter().map(|t| fold_scalar(t / eps)).collect();
            z(x) * psi(&y, u.value(i))
        })
        .collect();
    pairwise_sum(&terms) * spec.macro_cell_volume()
}

/// `∫_Ω ∫_Q ∫ z(x) ψ(y, ξ) dν_(x,y)(ξ) dy dx`.
pub fn measure_pairing(nu: &AtomicYoungMeasure, z: &dyn Fn(&[f64]) -> f64, psi: &dyn Fn(&[f64], &[f64]) -> f64) -> f64 {
    let spec = nu.spec();
    let xs = spec.macro_points();
    let ys = spec.cell_points();
    let n_cell = spec.n_cell_cells();
    let terms: Vec<f64> = xs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let inner: Vec<f64> = (0..n_cell)
                .map(|j| {
                    let c = nu.cell_index(i, j);
                    (0..nu.atoms_per_cell())
                        .map(|k| nu.weight(c, k) * psi(ys.get(j), nu.atom(c, k)))
                        .sum::<f64>()
                })
                .collect();
            z(x) * pairwise_sum(&inner) * spec.cell_cell_volume()
        })
        .collect();
    pairwise_sum(&terms) * spec.macro_cell_volume()
}

/// Named macro test function.
#[derive(Clone)]
pub struct MacroTest {
    pub label: String,
    pub f: MacroFn,
}

impl MacroTest {
    pub fn new(label: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        MacroTest {
            label: label.into(),
            f: Arc::new(f),
        }
    }
}

/// Named test function of `(y, ξ)`.
#[derive(Clone)]
pub struct CellStateTest {
    pub label: String,
    pub f: CellStateFn,
}

impl CellStateTest {
    pub fn new(label: impl Into<String>, f: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        CellStateTest {
            label: label.into(),
            f: Arc::new(f),
        }
    }
}

/// Errors below this (relative to `1 + |target|`) count as exact.
pub const EXACT_FLOOR: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct PairingResult {
    pub test_id: String,
    pub eps: Vec<f64>,
    pub values: Vec<f64>,
    pub target: f64,
    /// Log-log slope of `|value − target|` against ε over the points above the
    /// exactness floor; `None` with fewer than 3 such points.
    pub rate_estimate: Option<f64>,
    /// Every error is at round-off level.
    pub exact: bool,
}

impl PairingResult {
    pub fn new(test_id: String, eps: Vec<f64>, values: Vec<f64>, target: f64) -> Self {
        let floor = EXACT_FLOOR * (1.0 + target.abs());
        let pts: Vec<(f64, f64)> = eps
            .iter()
            .zip(&values)
            .map(|(e, v)| (e.ln(), (v - target).abs()))
            .filter(|(_, err)| *err > floor)
            .map(|(le, err)| (le, err.ln()))
            .collect();
        let exact = pts.is_empty();
        let rate_estimate = if pts.len() >= 3 {
            let xs: Vec<f64> = pts.iter().map(|p| p.0).collect();
            let ys: Vec<f64> = pts.iter().map(|p| p.1).collect();
            Some(linear_slope(&xs, &ys))
        } else {
            None
        };
        PairingResult {
            test_id,
            eps,
            values,
            target,
            rate_estimate,
            exact,
        }
    }

    pub fn errors(&self) -> Vec<f64> {
        self.values.iter().map(|v| (v - self.target).abs()).collect()
    }

    pub fn final_error(&self) -> f64 {
        self.errors().last().copied().unwrap_or(f64::NAN)
    }

    /// Converges at rate at least `min_rate` (or is exact).
    pub fn passes(&self, min_rate: f64) -> bool {
        self.exact || self.rate_estimate.is_some_and(|r| r >= min_rate)
    }
}

/// Compares empirical pairings along the schedule with the measure pairings,
/// for every `(z, ψ)` in the product of the two batteries.
pub fn test_generation(
    seq: &OscillationSequence,
    nu: &AtomicYoungMeasure,
    z_battery: &[MacroTest],
    psi_battery: &[CellStateTest],
) -> Result<Vec<PairingResult>> {
    if z_battery.is_empty() || psi_battery.is_empty() {
        return Err(Error::InvalidArgument("test batteries must be nonempty".into()));
    }
    seq.check_resolution()?;
    let fields: Vec<GridField> = (0..seq.len()).map(|n| seq.realize(n)).collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(z_battery.len() * psi_battery.len());
    for z in z_battery {
        for psi in psi_battery {
            let values: Vec<f64> = fields
                .iter()
                .zip(&seq.eps_schedule)
                .map(|(u, &eps)| empirical_pairing(u, eps, &*z.f, &*psi.f))
                .collect();
            let target = measure_pairing(nu, &*z.f, &*psi.f);
            out.push(PairingResult::new(
                format!("{}*{}", z.label, psi.label),
                seq.eps_schedule.clone(),
                values,
                target,
            ));
        }
    }
    Ok(out)
}

/// Test pair `φ(x) ψ(y)` for two-scale convergence.
#[derive(Clone)]
pub struct TwoScaleTest {
    pub label: String,
    pub macro_fn: MacroFn,
    pub periodic_fn: MacroFn,
}

impl TwoScaleTest {
    pub fn new(
        label: impl Into<String>,
        macro_fn: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        periodic_fn: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        TwoScaleTest {
            label: label.into(),
            macro_fn: Arc::new(macro_fn),
            periodic_fn: Arc::new(periodic_fn),
        }
    }
}

/// `∫ φ(x) ψ(x/ε_n) · u_n(x) dx` against `∬ φ(x) ψ(y) · u₁(x, y) dy dx`, with
/// the dot product summing the state components.
pub fn test_two_scale_convergence(
    seq: &OscillationSequence,
    u1: &TwoScaleField,
    tests: &[TwoScaleTest],
) -> Result<Vec<PairingResult>> {
    if tests.is_empty() {
        return Err(Error::InvalidArgument("test list must be nonempty".into()));
    }
    seq.check_resolution()?;
    let fields: Vec<GridField> = (0..seq.len()).map(|n| seq.realize(n)).collect::<Result<_>>()?;
    let uspec = u1.spec();
    let xs = uspec.macro_points();
    let ys = uspec.cell_points();
    let mut out = Vec::with_capacity(tests.len());
    for t in tests {
        let values: Vec<f64> = fields
            .iter()
            .zip(&seq.eps_schedule)
            .map(|(u, &eps)| {
                empirical_pairing(u, eps, &*t.macro_fn, &|y, xi| (t.periodic_fn)(y) * xi.iter().sum::<f64>())
            })
            .collect();
        let terms: Vec<f64> = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let inner: Vec<f64> = ys
                    .iter()
                    .enumerate()
                    .map(|(j, y)| (t.periodic_fn)(y) * u1.value(i, j).iter().sum::<f64>())
                    .collect();
                (t.macro_fn)(x) * pairwise_sum(&inner) * uspec.cell_cell_volume()
            })
            .collect();
        let target = pairwise_sum(&terms) * uspec.macro_cell_volume();
        out.push(PairingResult::new(t.label.clone(), seq.eps_schedule.clone(), values, target));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductReport {
    pub eps: Vec<f64>,
    /// `∬ θ₁(x) θ₂(x') ψ₁(⟨x/ε⟩, u_n(x)) ψ₂(⟨x'/ε⟩, u_n(x')) dx dx'` per n.
    pub joint: Vec<f64>,
    /// Product of the two measure pairings.
    pub product_of_marginals: f64,
    pub gaps: Vec<f64>,
}

/// Joint pairings of separable test data against the product of the two
/// measure pairings.
pub fn test_product_structure(
    seq: &OscillationSequence,
    nu: &AtomicYoungMeasure,
    theta1: &dyn Fn(&[f64]) -> f64,
    theta2: &dyn Fn(&[f64]) -> f64,
    psi1: &dyn Fn(&[f64], &[f64]) -> f64,
    psi2: &dyn Fn(&[f64], &[f64]) -> f64,
) -> Result<ProductReport> {
    let product_of_marginals = measure_pairing(nu, theta1, psi1) * measure_pairing(nu, theta2, psi2);
    let mut joint = Vec::with_capacity(seq.len());
    for (n, &eps) in seq.eps_schedule.iter().enumerate() {
        let u = seq.realize(n)?;
        // the double integral of a separable integrand factorizes over x and x'
        joint.push(empirical_pairing(&u, eps, theta1, psi1) * empirical_pairing(&u, eps, theta2, psi2));
    }
    let gaps = joint.iter().map(|j| (j - product_of_marginals).abs()).collect();
    Ok(ProductReport {
        eps: seq.eps_schedule.clone(),
        joint,
        product_of_marginals,
        gaps,
    })
}

/// ε schedule `1/2^a, …, 1/2^b`.
pub fn dyadic_schedule(coarsest_pow: u32, finest_pow: u32) -> Vec<f64> {
    (coarsest_pow..=finest_pow).map(|k| 1.0 / (1u64 << k) as f64).collect()
}
