//! Local densities `f(y, ξ)`, non-local densities `W(x, x', y, y', ξ, ξ')`,
//! sampled audits of their structural hypotheses, and lower convex envelopes
//! in the state variable.
//!
//! Audits sample; they can exhibit a counterexample but never certify a
//! universally quantified hypothesis.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::seeded_rng;

pub type LocalFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;
pub type PairFn = Arc<dyn Fn(&PairArgs) -> f64 + Send + Sync>;

pub const DEFAULT_WINDOW: (f64, f64) = (-4.0, 4.0);

/// Arguments of a non-local density: macro points, cell points, states.
#[derive(Debug, Clone, Copy)]
pub struct PairArgs<'a> {
    pub x: &'a [f64],
    pub xp: &'a [f64],
    pub y: &'a [f64],
    pub yp: &'a [f64],
    pub xi: &'a [f64],
    pub xip: &'a [f64],
}

impl<'a> PairArgs<'a> {
    /// `(x, x', y, y', ξ, ξ') -> (x', x, y', y, ξ', ξ)`
    pub fn swapped(&self) -> PairArgs<'a> {
        PairArgs {
            x: self.xp,
            xp: self.x,
            y: self.yp,
            yp: self.y,
            xi: self.xip,
            xip: self.xi,
        }
    }
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// The weight `2 + sin 2πy₀` used by the weighted catalog entries.
#[inline]
pub fn sine_weight(y: &[f64]) -> f64 {
    2.0 + (2.0 * PI * y[0]).sin()
}

/// A periodic local density with its growth metadata.
#[derive(Clone)]
pub struct IntegrandF {
    eval: LocalFn,
    pub growth_c: f64,
    pub p: f64,
    pub label: String,
    pub dim_macro: usize,
    pub dim_state: usize,
    /// State window used for envelopes and pointwise minimization.
    pub window: (f64, f64),
}

impl fmt::Debug for IntegrandF {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("IntegrandF")
            .field("label", &self.label)
            .field("growth_c", &self.growth_c)
            .field("p", &self.p)
            .field("window", &self.window)
            .finish()
    }
}

pub const LOCAL_CATALOG: &[&str] = &[
    "quadratic",
    "weighted_quadratic",
    "double_well",
    "tilted_weighted",
    "tilted_weighted2",
    "concave_window",
];

impl IntegrandF {
    pub fn new(
        label: impl Into<String>,
        growth_c: f64,
        p: f64,
        eval: impl Fn(&[f64], &[f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        IntegrandF {
            eval: Arc::new(eval),
            growth_c,
            p,
            label: label.into(),
            dim_macro: 1,
            dim_state: 1,
            window: DEFAULT_WINDOW,
        }
    }

    pub fn with_window(mut self, lo: f64, hi: f64) -> Self {
        self.window = (lo, hi);
        self
    }

    pub fn with_dims(mut self, dim_macro: usize, dim_state: usize) -> Self {
        self.dim_macro = dim_macro;
        self.dim_state = dim_state;
        self
    }

    #[inline]
    pub fn eval(&self, y: &[f64], xi: &[f64]) -> f64 {
        (self.eval)(y, xi)
    }

    /// Built-in densities, all with N = d = 1.
    pub fn catalog(name: &str) -> Result<Self> {
        let f = match name {
            "quadratic" => IntegrandF::new(name, 1.0, 2.0, |_, xi| xi[0] * xi[0]),
            "weighted_quadratic" => {
                IntegrandF::new(name, 3.0, 2.0, |y, xi| sine_weight(y) * xi[0] * xi[0])
            }
            "double_well" => IntegrandF::new(name, 1.0, 4.0, |_, xi| {
                let s = xi[0] * xi[0] - 1.0;
                s * s
            }),
            "tilted_weighted" => IntegrandF::new(name, 4.0, 2.0, |y, xi| {
                sine_weight(y) * xi[0] * xi[0] - xi[0]
            }),
            "tilted_weighted2" => IntegrandF::new(name, 4.0, 2.0, |y, xi| {
                sine_weight(y) * xi[0] * xi[0] - 2.0 * xi[0]
            }),
            "concave_window" => {
                IntegrandF::new(name, 4.0, 2.0, |_, xi| 4.0 - xi[0] * xi[0]).with_window(-2.0, 2.0)
            }
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown integrand '{name}'; catalog: {}",
                    LOCAL_CATALOG.join(", ")
                )))
            }
        };
        Ok(f)
    }

    pub fn from_piecewise(
        label: impl Into<String>,
        poly: PiecewisePolynomial,
        weight: Option<TrigWeight>,
        growth_c: f64,
        p: f64,
    ) -> Self {
        match weight {
            Some(w) => IntegrandF::new(label, growth_c, p, move |y, xi| w.eval(y) * poly.eval(xi[0])),
            None => IntegrandF::new(label, growth_c, p, move |_, xi| poly.eval(xi[0])),
        }
    }
}

/// A polynomial in ξ on each of a sorted list of contiguous intervals; the
/// first and last pieces extend to infinity.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewisePolynomial {
    pieces: Vec<PolyPiece>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolyPiece {
    pub lo: f64,
    pub hi: f64,
    /// Coefficients in increasing degree.
    pub coeffs: Vec<f64>,
}

impl PiecewisePolynomial {
    pub fn new(pieces: Vec<PolyPiece>) -> Result<Self> {
        if pieces.is_empty() {
            return Err(Error::InvalidArgument("piecewise polynomial needs at least one piece".into()));
        }
        for (i, piece) in pieces.iter().enumerate() {
            if !(piece.lo < piece.hi) {
                return Err(Error::InvalidArgument(format!("piece {i} has lo >= hi")));
            }
            if piece.coeffs.is_empty() || piece.coeffs.iter().any(|c| !c.is_finite()) {
                return Err(Error::InvalidArgument(format!("piece {i} has invalid coefficients")));
            }
            if i > 0 && (pieces[i - 1].hi - piece.lo).abs() > 1e-12 {
                return Err(Error::InvalidArgument(format!(
                    "pieces {} and {i} are not contiguous",
                    i - 1
                )));
            }
        }
        Ok(PiecewisePolynomial { pieces })
    }

    pub fn eval(&self, xi: f64) -> f64 {
        let piece = self
            .pieces
            .iter()
            .find(|p| xi < p.hi)
            .unwrap_or_else(|| self.pieces.last().unwrap());
        piece.coeffs.iter().rev().fold(0.0, |acc, c| acc * xi + c)
    }
}

/// `a(y) = mean + Σ_k sin_k sin(2πk y₀) + cos_k cos(2πk y₀)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrigWeight {
    pub mean: f64,
    pub sin: Vec<f64>,
    pub cos: Vec<f64>,
}

impl TrigWeight {
    pub fn eval(&self, y: &[f64]) -> f64 {
        let t = 2.0 * PI * y[0];
        let mut acc = self.mean;
        for (k, s) in self.sin.iter().enumerate() {
            acc += s * ((k + 1) as f64 * t).sin();
        }
        for (k, c) in self.cos.iter().enumerate() {
            acc += c * ((k + 1) as f64 * t).cos();
        }
        acc
    }
}

/// A symmetric non-local density with growth constants
/// `α + |ξ|^p / c ≤ W ≤ a + c(|ξ|^p + |ξ'|^p)`.
#[derive(Clone)]
pub struct NonlocalW {
    eval: PairFn,
    pub a_bound: f64,
    pub alpha_bound: f64,
    pub c: f64,
    pub p: f64,
    pub label: String,
    pub dim_macro: usize,
    pub dim_state: usize,
    pub window: (f64, f64),
    /// Box from which audits sample macro points.
    pub x_box: (Vec<f64>, Vec<f64>),
    /// Set by `nonlocal::reduce_y_independent` after a passing audit.
    pub y_independent: bool,
}

impl fmt::Debug for NonlocalW {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlocalW")
            .field("label", &self.label)
            .field("a", &self.a_bound)
            .field("alpha", &self.alpha_bound)
            .field("c", &self.c)
            .field("p", &self.p)
            .field("y_independent", &self.y_independent)
            .finish()
    }
}

pub const NONLOCAL_CATALOG: &[&str] = &["quadratic", "double_well", "tilted_weighted", "weighted_coupled"];

impl NonlocalW {
    pub fn new(
        label: impl Into<String>,
        a_bound: f64,
        alpha_bound: f64,
        c: f64,
        p: f64,
        eval: impl Fn(&PairArgs) -> f64 + Send + Sync + 'static,
    ) -> Self {
        NonlocalW {
            eval: Arc::new(eval),
            a_bound,
            alpha_bound,
            c,
            p,
            label: label.into(),
            dim_macro: 1,
            dim_state: 1,
            window: DEFAULT_WINDOW,
            x_box: (vec![0.0], vec![1.0]),
            y_independent: false,
        }
    }

    pub fn with_dims(mut self, dim_macro: usize, dim_state: usize) -> Self {
        self.dim_macro = dim_macro;
        self.dim_state = dim_state;
        self.x_box = (vec![0.0; dim_macro], vec![1.0; dim_macro]);
        self
    }

    pub fn with_x_box(mut self, lo: Vec<f64>, hi: Vec<f64>) -> Self {
        self.x_box = (lo, hi);
        self
    }

    pub fn with_window(mut self, lo: f64, hi: f64) -> Self {
        self.window = (lo, hi);
        self
    }

    #[inline]
    pub fn eval(&self, args: &PairArgs) -> f64 {
        (self.eval)(args)
    }

    /// `W = g(y, ξ) + g(y', ξ') + κ ξ ξ'` built from a local density.
    pub fn from_local(local: IntegrandF, coupling: f64, a_bound: f64, alpha_bound: f64, c: f64) -> Self {
        let p = local.p;
        let label = if coupling == 0.0 {
            format!("{}_pair", local.label)
        } else {
            format!("{}_pair_coupled", local.label)
        };
        let window = local.window;
        NonlocalW::new(label, a_bound, alpha_bound, c, p, move |a| {
            let mut v = local.eval(a.y, a.xi) + local.eval(a.yp, a.xip);
            if coupling != 0.0 {
                v += coupling * a.xi.iter().zip(a.xip).map(|(s, t)| s * t).sum::<f64>();
            }
            v
        })
        .with_window(window.0, window.1)
    }

    /// Built-in non-local densities, all with N = d = 1.
    pub fn catalog(name: &str) -> Result<Self> {
        let w = match name {
            "quadratic" => NonlocalW::new(name, 0.0, 0.0, 1.0, 2.0, |a| {
                a.xi[0] * a.xi[0] + a.xip[0] * a.xip[0]
            }),
            "double_well" => NonlocalW::new(name, 2.0, -1.0, 2.0, 4.0, |a| {
                let s = a.xi[0] * a.xi[0] - 1.0;
                let t = a.xip[0] * a.xip[0] - 1.0;
                s * s + t * t
            }),
            "tilted_weighted" => NonlocalW::new(name, 1.0, -1.0, 4.0, 2.0, |a| {
                sine_weight(a.y) * a.xi[0] * a.xi[0] + sine_weight(a.yp) * a.xip[0] * a.xip[0]
                    - a.xi[0]
                    - a.xip[0]
            }),
            "weighted_coupled" => NonlocalW::new(name, 0.0, 0.0, 4.0, 2.0, |a| {
                sine_weight(a.y) * a.xi[0] * a.xi[0]
                    + sine_weight(a.yp) * a.xip[0] * a.xip[0]
                    + 0.5 * a.xi[0] * a.xip[0]
            }),
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "unknown non-local density '{name}'; catalog: {}",
                    NONLOCAL_CATALOG.join(", ")
                )))
            }
        };
        Ok(w)
    }
}

/// One sampled argument tuple of a non-local density.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTuple {
    pub x: Vec<f64>,
    pub xp: Vec<f64>,
    pub y: Vec<f64>,
    pub yp: Vec<f64>,
    pub xi: Vec<f64>,
    pub xip: Vec<f64>,
}

impl SampleTuple {
    pub fn args(&self) -> PairArgs<'_> {
        PairArgs {
            x: &self.x,
            xp: &self.xp,
            y: &self.y,
            yp: &self.yp,
            xi: &self.xi,
            xip: &self.xip,
        }
    }
}

/// Seeded audit tuples: a structured ξ-grid (so that large and unit states are
/// always probed) followed by uniform random tuples.
pub fn audit_tuples(w: &NonlocalW, n_samples: usize, seed: u64) -> Vec<SampleTuple> {
    let mut rng = seeded_rng(seed);
    let (wlo, whi) = w.window;
    let n = w.dim_macro;
    let d = w.dim_state;
    let rand_point = |lo: &[f64], hi: &[f64], rng: &mut rand_chacha::ChaCha8Rng| -> Vec<f64> {
        lo.iter().zip(hi).map(|(l, h)| rng.gen_range(*l..*h)).collect()
    };
    let unit_lo = vec![0.0; n];
    let unit_hi = vec![1.0; n];
    let probes = [wlo, wlo / 2.0, -1.0, 0.0, 1.0, whi / 2.0, whi];
    let mut out = Vec::with_capacity(n_samples + probes.len() * probes.len());
    for &s in &probes {
        for &t in &probes {
            out.push(SampleTuple {
                x: rand_point(&w.x_box.0, &w.x_box.1, &mut rng),
                xp: rand_point(&w.x_box.0, &w.x_box.1, &mut rng),
                y: rand_point(&unit_lo, &unit_hi, &mut rng),
                yp: rand_point(&unit_lo, &unit_hi, &mut rng),
                xi: vec![s; d],
                xip: vec![t; d],
            });
        }
    }
    for _ in 0..n_samples {
        out.push(SampleTuple {
            x: rand_point(&w.x_box.0, &w.x_box.1, &mut rng),
            xp: rand_point(&w.x_box.0, &w.x_box.1, &mut rng),
            y: rand_point(&unit_lo, &unit_hi, &mut rng),
            yp: rand_point(&unit_lo, &unit_hi, &mut rng),
            xi: (0..d).map(|_| rng.gen_range(wlo..whi)).collect(),
            xip: (0..d).map(|_| rng.gen_range(wlo..whi)).collect(),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymmetryReport {
    pub max_violation: f64,
    pub samples: usize,
    pub worst: Option<SampleTuple>,
}

/// Largest `|W(x,x',y,y',ξ,ξ') − W(x',x,y',y,ξ',ξ)|` over the audit tuples.
pub fn audit_symmetry(w: &NonlocalW, n_samples: usize, seed: u64) -> SymmetryReport {
    let tuples = audit_tuples(w, n_samples.max(1), seed);
    let mut max_violation = 0.0;
    let mut worst = None;
    for t in &tuples {
        let a = t.args();
        let v = (w.eval(&a) - w.eval(&a.swapped())).abs();
        if v > max_violation || (v.is_nan() && worst.is_none()) {
            max_violation = v;
            worst = Some(t.clone());
        }
    }
    SymmetryReport {
        max_violation,
        samples: tuples.len(),
        worst,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GrowthSide {
    Lower,
    Upper,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthWitness {
    pub side: GrowthSide,
    pub tuple: SampleTuple,
    pub value: f64,
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrowthReport {
    pub lower_ok: bool,
    pub upper_ok: bool,
    pub samples: usize,
    /// First counterexample found for each failing side.
    pub witnesses: Vec<GrowthWitness>,
}

/// Checks `α + |ξ|^p / c ≤ W ≤ a + c(|ξ|^p + |ξ'|^p)` on the audit tuples.
pub fn audit_growth(w: &NonlocalW, n_samples: usize, seed: u64) -> GrowthReport {
    let tuples = audit_tuples(w, n_samples.max(1), seed);
    let slack = 1e-12;
    let mut witnesses = Vec::new();
    let mut lower_ok = true;
    let mut upper_ok = true;
    for t in &tuples {
        let a = t.args();
        let value = w.eval(&a);
        let np = norm(a.xi).powf(w.p);
        let npp = norm(a.xip).powf(w.p);
        let lower = w.alpha_bound + np / w.c;
        let upper = w.a_bound + w.c * (np + npp);
        let tol = slack * (1.0 + value.abs());
        if lower_ok && !(value >= lower - tol) {
            lower_ok = false;
            witnesses.push(GrowthWitness {
                side: GrowthSide::Lower,
                tuple: t.clone(),
                value,
                bound: lower,
            });
        }
        if upper_ok && !(value <= upper + tol) {
            upper_ok = false;
            witnesses.push(GrowthWitness {
                side: GrowthSide::Upper,
                tuple: t.clone(),
                value,
                bound: upper,
            });
        }
    }
    GrowthReport {
        lower_ok,
        upper_ok,
        samples: tuples.len(),
        witnesses,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntegrandAudit {
    pub growth_ok: bool,
    pub continuity_ok: bool,
    pub max_growth_ratio: f64,
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
}

/// Sampled membership probe for the class of admissible local densities:
/// `|f(y,ξ)| ≤ c(1 + |ξ|^p)` and a finite-difference continuity probe in ξ.
/// The uniform limit at infinity cannot be probed and is taken on trust.
pub fn audit_integrand(f: &IntegrandF, n_samples: usize, seed: u64) -> IntegrandAudit {
    let mut rng = seeded_rng(seed);
    let (lo, hi) = f.window;
    let mut growth_ok = true;
    let mut continuity_ok = true;
    let mut max_ratio: f64 = 0.0;
    let mut witness = None;
    for _ in 0..n_samples.max(1) {
        let y: Vec<f64> = (0..f.dim_macro).map(|_| rng.gen_range(0.0..1.0)).collect();
        let xi: Vec<f64> = (0..f.dim_state).map(|_| rng.gen_range(2.0 * lo..2.0 * hi)).collect();
        let v = f.eval(&y, &xi);
        let bound = 1.0 + norm(&xi).powf(f.p);
        let ratio = v.abs() / bound;
        max_ratio = max_ratio.max(ratio);
        if growth_ok && !(v.abs() <= f.growth_c * bound * (1.0 + 1e-12)) {
            growth_ok = false;
            witness = Some((y.clone(), xi.clone()));
        }
        let h = 1e-7 * (1.0 + norm(&xi));
        let shifted: Vec<f64> = xi.iter().map(|s| s + h).collect();
        let jump = (f.eval(&y, &shifted) - v).abs();
        if continuity_ok && !(jump <= 1e-3 * (1.0 + v.abs())) {
            continuity_ok = false;
            witness.get_or_insert((y, xi));
        }
    }
    IntegrandAudit {
        growth_ok,
        continuity_ok,
        max_growth_ratio: max_ratio,
        witness,
    }
}

/// Envelope of one y-slice: hull values at every grid point plus, per grid
/// interval, whether the hull coincides with `f` at both ends (a contact
/// segment) or bridges over it with a chord.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvelopeSlice {
    pub y: Vec<f64>,
    pub values: Vec<f64>,
    pub contact: Vec<bool>,
}

fn check_grid(xi_grid: &[f64]) -> Result<()> {
    if xi_grid.len() < 2 {
        return Err(Error::InvalidArgument("envelope grid needs at least two points".into()));
    }
    if xi_grid.iter().any(|v| !v.is_finite()) || xi_grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidArgument(
            "envelope grid must be finite and strictly increasing".into(),
        ));
    }
    Ok(())
}

/// Lower convex hull (monotone chain) of the samples `(ξ_i, f(y, ξ_i))`,
/// evaluated back at every `ξ_i`.
pub fn convex_envelope_1d(f: &IntegrandF, y: &[f64], xi_grid: &[f64]) -> Result<EnvelopeSlice> {
    if f.dim_state != 1 {
        return Err(Error::UnsupportedDimension {
            got: f.dim_state,
            supported: 1,
        });
    }
    check_grid(xi_grid)?;
    let samples: Vec<f64> = xi_grid.iter().map(|&s| f.eval(y, &[s])).collect();
    if let Some(i) = samples.iter().position(|v| !v.is_finite()) {
        return Err(Error::EvaluationFailure(format!(
            "{} is not finite at ξ = {}",
            f.label, xi_grid[i]
        )));
    }
    let (values, contact) = lower_hull_values(xi_grid, &samples);
    Ok(EnvelopeSlice {
        y: y.to_vec(),
        values,
        contact,
    })
}

/// Monotone-chain lower hull of `(xs, ys)`; returns hull values at every `xs`
/// and per-interval contact flags.
pub fn lower_hull_values(xs: &[f64], ys: &[f64]) -> (Vec<f64>, Vec<bool>) {
    let mut hull: Vec<usize> = Vec::with_capacity(xs.len());
    for i in 0..xs.len() {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            // drop b unless it lies strictly below the chord a -> i
            let cross = (xs[b] - xs[a]) * (ys[i] - ys[a]) - (ys[b] - ys[a]) * (xs[i] - xs[a]);
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    let mut values = vec![0.0; xs.len()];
    let mut contact = vec![false; xs.len() - 1];
    for w in hull.windows(2) {
        let (a, b) = (w[0], w[1]);
        let slope = (ys[b] - ys[a]) / (xs[b] - xs[a]);
        for i in a..=b {
            values[i] = if i == a {
                ys[a]
            } else if i == b {
                ys[b]
            } else {
                ys[a] + slope * (xs[i] - xs[a])
            };
        }
        if b == a + 1 {
            contact[a] = true;
        }
    }
    (values, contact)
}

/// Envelope samples of `co f` for a list of cell points over a shared ξ-grid.
#[derive(Debug, Clone)]
pub struct EnvelopeTable {
    pub xi_grid: Vec<f64>,
    pub slices: Vec<EnvelopeSlice>,
}

impl EnvelopeTable {
    pub fn build(f: &IntegrandF, y_points: &[Vec<f64>], xi_grid: Vec<f64>) -> Result<Self> {
        check_grid(&xi_grid)?;
        let slices = y_points
            .par_iter()
            .map(|y| convex_envelope_1d(f, y, &xi_grid))
            .collect::<Result<Vec<_>>>()?;
        Ok(EnvelopeTable { xi_grid, slices })
    }

    /// Uniform grid on the integrand's window with the given number of intervals.
    pub fn default_grid(window: (f64, f64), intervals: usize) -> Vec<f64> {
        let h = (window.1 - window.0) / intervals as f64;
        (0..=intervals).map(|i| window.0 + i as f64 * h).collect()
    }

    /// `co f(y_row, ξ)`: `f` itself on contact intervals, the hull chord on
    /// bridged intervals, and linear extension of the end segments outside
    /// the grid.
    pub fn eval(&self, f: &IntegrandF, row: usize, xi: f64) -> f64 {
        let grid = &self.xi_grid;
        let slice = &self.slices[row];
        let n = grid.len();
        let seg = if xi <= grid[0] {
            0
        } else if xi >= grid[n - 1] {
            n - 2
        } else {
            match grid.binary_search_by(|g| g.total_cmp(&xi)) {
                Ok(i) => return slice.values[i],
                Err(i) => i - 1,
            }
        };
        let inside = xi >= grid[0] && xi <= grid[n - 1];
        if inside && slice.contact[seg] {
            return f.eval(&slice.y, &[xi]);
        }
        let t = (xi - grid[seg]) / (grid[seg + 1] - grid[seg]);
        slice.values[seg] + t * (slice.values[seg + 1] - slice.values[seg])
    }

    /// Discrete convexity and domination checks on every slice.
    pub fn check_invariants(&self, f: &IntegrandF) -> Result<()> {
        for (r, slice) in self.slices.iter().enumerate() {
            let samples: Vec<f64> = self.xi_grid.iter().map(|&s| f.eval(&slice.y, &[s])).collect();
            let scale = samples.iter().fold(1e-300_f64, |m, v| m.max(v.abs()));
            let tol = 1e-9 * scale;
            for (i, (v, s)) in slice.values.iter().zip(&samples).enumerate() {
                if *v > s + tol {
                    return Err(Error::PreconditionViolation(format!(
                        "envelope row {r} exceeds f at grid point {i}"
                    )));
                }
            }
            for i in 1..self.xi_grid.len() - 1 {
                let (x0, x1, x2) = (self.xi_grid[i - 1], self.xi_grid[i], self.xi_grid[i + 1]);
                let (v0, v1, v2) = (slice.values[i - 1], slice.values[i], slice.values[i + 1]);
                let second = (v2 - v1) / (x2 - x1) - (v1 - v0) / (x1 - x0);
                if second < -tol {
                    return Err(Error::PreconditionViolation(format!(
                        "envelope row {r} is not convex at grid point {i}"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
        let n = ((hi - lo) / step).round() as usize;
        (0..=n).map(|i| lo + i as f64 * step).collect()
    }

    /// Independent oracle: the envelope at ξ_i is the minimum over all chords
    /// (ξ_a, ξ_b) with ξ_a ≤ ξ_i ≤ ξ_b of the chord value.
    fn chord_oracle(xs: &[f64], ys: &[f64], i: usize) -> f64 {
        let mut best = ys[i];
        for a in 0..=i {
            for b in i..xs.len() {
                if a == b {
                    continue;
                }
                let t = (xs[i] - xs[a]) / (xs[b] - xs[a]);
                best = best.min(ys[a] + t * (ys[b] - ys[a]));
            }
        }
        best
    }

    #[test]
    fn symmetry_audit_examples() {
        let sym = NonlocalW::catalog("quadratic").unwrap();
        assert_eq!(audit_symmetry(&sym, 200, 3).max_violation, 0.0);
        let anti = NonlocalW::new("anti", 0.0, 0.0, 1.0, 2.0, |a| a.xi[0] - a.xip[0]);
        let rep = audit_symmetry(&anti, 200, 3);
        let t = rep.worst.unwrap();
        assert!(rep.max_violation > 0.0);
        assert!((rep.max_violation - 2.0 * (t.xi[0] - t.xip[0]).abs()).abs() < 1e-12);
        let coupled = NonlocalW::catalog("weighted_coupled").unwrap();
        assert_eq!(audit_symmetry(&coupled, 200, 3).max_violation, 0.0);
    }

    #[test]
    fn growth_audit_examples() {
        let q = NonlocalW::catalog("quadratic").unwrap();
        let rep = audit_growth(&q, 500, 1);
        assert!(rep.lower_ok && rep.upper_ok);

        let quartic = NonlocalW::new("quartic", 0.0, 0.0, 1.0, 2.0, |a| a.xi[0].powi(4));
        let rep = audit_growth(&quartic, 500, 1);
        assert!(!rep.upper_ok);
        let wit = rep.witnesses.iter().find(|w| w.side == GrowthSide::Upper).unwrap();
        assert!(wit.value > wit.bound);

        // oracle: min over a fine ξ-grid of W − lower and upper − W, with y sampled densely
        let w = NonlocalW::catalog("tilted_weighted").unwrap();
        let xs = grid(-6.0, 6.0, 0.05);
        let mut min_lower_gap = f64::INFINITY;
        let mut min_upper_gap = f64::INFINITY;
        for yi in 0..32 {
            let y = [(yi as f64 + 0.5) / 32.0];
            for &s in &xs {
                for &t in xs.iter().step_by(4) {
                    let a = PairArgs { x: &[0.5], xp: &[0.5], y: &y, yp: &y, xi: &[s], xip: &[t] };
                    let v = w.eval(&a);
                    min_lower_gap = min_lower_gap.min(v - (-1.0 + s * s / 4.0));
                    min_upper_gap = min_upper_gap.min(1.0 + 4.0 * (s * s + t * t) - v);
                }
            }
        }
        assert!(min_lower_gap >= 0.0 && min_upper_gap >= 0.0);
        let rep = audit_growth(&w, 2000, 9);
        assert!(rep.lower_ok && rep.upper_ok, "{:?}", rep.witnesses);
    }

    #[test]
    fn catalog_growth_constants_hold() {
        for name in NONLOCAL_CATALOG {
            let w = NonlocalW::catalog(name).unwrap();
            let rep = audit_growth(&w, 2000, 5);
            assert!(rep.lower_ok && rep.upper_ok, "{name}: {:?}", rep.witnesses);
            assert!(audit_symmetry(&w, 500, 5).max_violation < 1e-12, "{name}");
        }
        for name in LOCAL_CATALOG {
            let f = IntegrandF::catalog(name).unwrap();
            let rep = audit_integrand(&f, 2000, 4);
            assert!(rep.growth_ok && rep.continuity_ok, "{name}: {rep:?}");
        }
        assert!(IntegrandF::catalog("nope").unwrap_err().to_string().contains("catalog"));
    }

    #[test]
    fn envelope_of_convex_is_identity() {
        let f = IntegrandF::catalog("quadratic").unwrap();
        let xs = grid(-2.0, 2.0, 0.01);
        let env = convex_envelope_1d(&f, &[0.5], &xs).unwrap();
        for (x, v) in xs.iter().zip(&env.values) {
            assert_eq!(*v, x * x);
        }
        assert!(env.contact.iter().all(|&c| c));
    }

    #[test]
    fn envelope_of_double_well_matches_chord_oracle() {
        let f = IntegrandF::catalog("double_well").unwrap();
        let xs = grid(-3.0, 3.0, 0.05);
        let ys: Vec<f64> = xs.iter().map(|&s| f.eval(&[0.0], &[s])).collect();
        let env = convex_envelope_1d(&f, &[0.0], &xs).unwrap();
        for i in 0..xs.len() {
            assert!((env.values[i] - chord_oracle(&xs, &ys, i)).abs() < 1e-12, "i = {i}");
        }
        let at = |x: f64| env.values[xs.iter().position(|g| (g - x).abs() < 1e-9).unwrap()];
        assert!(at(0.0).abs() < 1e-12);
        assert!((at(2.0) - 9.0).abs() < 1e-12);
    }

    #[test]
    fn envelope_of_two_vees() {
        let f = IntegrandF::new("vees", 1.0, 1.5, |_, xi| (xi[0] + 1.0).abs().min((xi[0] - 1.0).abs()));
        let xs = grid(-2.0, 2.0, 0.01);
        let ys: Vec<f64> = xs.iter().map(|&s| f.eval(&[0.0], &[s])).collect();
        let env = convex_envelope_1d(&f, &[0.0], &xs).unwrap();
        for (i, &x) in xs.iter().enumerate() {
            let expected = if x.abs() <= 1.0 { 0.0 } else { x.abs() - 1.0 };
            assert!((env.values[i] - expected).abs() < 1e-12, "x = {x}");
            assert!((env.values[i] - chord_oracle(&xs, &ys, i)).abs() < 1e-12);
        }
    }

    #[test]
    fn envelope_errors() {
        let f = IntegrandF::catalog("quadratic").unwrap();
        assert!(matches!(
            convex_envelope_1d(&f, &[0.0], &[0.0, -1.0]),
            Err(Error::InvalidArgument(_))
        ));
        assert!(convex_envelope_1d(&f, &[0.0], &[0.0]).is_err());
        let f2 = IntegrandF::catalog("quadratic").unwrap().with_dims(1, 2);
        assert!(matches!(
            convex_envelope_1d(&f2, &[0.0], &[0.0, 1.0]),
            Err(Error::UnsupportedDimension { got: 2, .. })
        ));
    }

    #[test]
    fn table_eval_uses_f_on_contact_and_chords_elsewhere() {
        let f = IntegrandF::catalog("double_well").unwrap();
        let table = EnvelopeTable::build(&f, &[vec![0.25]], EnvelopeTable::default_grid((-4.0, 4.0), 800)).unwrap();
        table.check_invariants(&f).unwrap();
        assert_eq!(table.eval(&f, 0, 0.3), 0.0);
        assert_eq!(table.eval(&f, 0, 1.234), f.eval(&[0.25], &[1.234]));
        // linear extension beyond the window
        let slope = table.eval(&f, 0, 4.0) - table.eval(&f, 0, 3.99);
        let ext = table.eval(&f, 0, 5.0);
        assert!((ext - (table.eval(&f, 0, 4.0) + slope * 100.0)).abs() < 1e-6);
    }

    #[test]
    fn piecewise_polynomial_eval() {
        let pp = PiecewisePolynomial::new(vec![
            PolyPiece { lo: -10.0, hi: 0.0, coeffs: vec![0.0, -1.0] },
            PolyPiece { lo: 0.0, hi: 10.0, coeffs: vec![0.0, 0.0, 1.0] },
        ])
        .unwrap();
        assert_eq!(pp.eval(-2.0), 2.0);
        assert_eq!(pp.eval(3.0), 9.0);
        assert_eq!(pp.eval(20.0), 400.0);
        let gap = PiecewisePolynomial::new(vec![
            PolyPiece { lo: 0.0, hi: 1.0, coeffs: vec![1.0] },
            PolyPiece { lo: 2.0, hi: 3.0, coeffs: vec![1.0] },
        ]);
        assert!(gap.is_err());
        let w = TrigWeight { mean: 2.0, sin: vec![1.0], cos: vec![] };
        let f = IntegrandF::from_piecewise("pp", pp, Some(w), 3.0, 2.0);
        assert!((f.eval(&[0.25], &[3.0]) - 27.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn envelope_properties(coeffs in prop::collection::vec(-2.0f64..2.0, 5), tilt in -3.0f64..3.0, offset in -1.0f64..1.0) {
            let c = coeffs.clone();
            let f = IntegrandF::new("poly", 10.0, 4.0, move |_, xi| {
                let s = xi[0];
                c[0] + c[1] * s + c[2] * s * s + c[3] * s.powi(3) + (c[4].abs() + 0.1) * s.powi(4)
            });
            let c2 = coeffs.clone();
            let g = IntegrandF::new("poly+affine", 10.0, 4.0, move |_, xi| {
                let s = xi[0];
                c2[0] + c2[1] * s + c2[2] * s * s + c2[3] * s.powi(3) + (c2[4].abs() + 0.1) * s.powi(4) + tilt * s + offset
            });
            let xs = grid(-3.0, 3.0, 0.05);
            let ef = convex_envelope_1d(&f, &[0.0], &xs).unwrap();
            let eg = convex_envelope_1d(&g, &[0.0], &xs).unwrap();
            let scale = ef.values.iter().chain(&eg.values).fold(1.0f64, |m, v| m.max(v.abs()));
            for (i, &x) in xs.iter().enumerate() {
                prop_assert!(ef.values[i] <= f.eval(&[0.0], &[x]) + 1e-12 * scale);
                prop_assert!((eg.values[i] - (ef.values[i] + tilt * x + offset)).abs() < 1e-9 * scale);
            }
            for i in 1..xs.len() - 1 {
                let second = ef.values[i + 1] - 2.0 * ef.values[i] + ef.values[i - 1];
                prop_assert!(second >= -1e-9 * scale);
            }
        }
    }
}
