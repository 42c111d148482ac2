//! Uniform grids on the macro box and the unit cell, periodic folding,
//! midpoint quadrature and the discrete field containers used everywhere
//! else in the crate.
//!
//! Multi-indices are flattened with axis 0 varying fastest.

use crate::error::{Error, Result};
use crate::numerics::pairwise_sum;

/// Uniform partitions of the macro domain, the unit cell and the state space.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub dim_macro: usize,
    pub dim_state: usize,
    pub n_x: usize,
    pub n_y: usize,
    pub omega_lo: Vec<f64>,
    pub omega_hi: Vec<f64>,
    pub p_exponent: f64,
}

impl GridSpec {
    pub fn new(
        dim_macro: usize,
        dim_state: usize,
        n_x: usize,
        n_y: usize,
        omega_lo: Vec<f64>,
        omega_hi: Vec<f64>,
        p_exponent: f64,
    ) -> Result<Self> {
        let spec = GridSpec {
            dim_macro,
            dim_state,
            n_x,
            n_y,
            omega_lo,
            omega_hi,
            p_exponent,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// N = d = 1 on Ω = (0, 1) with p = 2.
    pub fn unit_1d(n_x: usize, n_y: usize) -> Result<Self> {
        Self::new(1, 1, n_x, n_y, vec![0.0], vec![1.0], 2.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim_macro == 0 || self.dim_state == 0 {
            return Err(Error::InvalidArgument(
                "dimensions N and d must be positive".into(),
            ));
        }
        if self.n_x == 0 || self.n_y == 0 {
            return Err(Error::InvalidArgument("n_x and n_y must be at least 1".into()));
        }
        if self.omega_lo.len() != self.dim_macro || self.omega_hi.len() != self.dim_macro {
            return Err(Error::InvalidArgument(format!(
                "omega corners must have {} components",
                self.dim_macro
            )));
        }
        for (lo, hi) in self.omega_lo.iter().zip(&self.omega_hi) {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::InvalidArgument(format!(
                    "omega_lo must be below omega_hi componentwise (got {lo} vs {hi})"
                )));
            }
        }
        if !(self.p_exponent > 1.0 && self.p_exponent.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "p must satisfy 1 < p < inf (got {})",
                self.p_exponent
            )));
        }
        Ok(())
    }

    pub fn with_n_x(&self, n_x: usize) -> Self {
        GridSpec { n_x, ..self.clone() }
    }

    pub fn with_n_y(&self, n_y: usize) -> Self {
        GridSpec { n_y, ..self.clone() }
    }

    pub fn n_macro_cells(&self) -> usize {
        self.n_x.pow(self.dim_macro as u32)
    }

    pub fn n_cell_cells(&self) -> usize {
        self.n_y.pow(self.dim_macro as u32)
    }

    /// Lebesgue measure of Ω.
    pub fn omega_measure(&self) -> f64 {
        self.omega_lo
            .iter()
            .zip(&self.omega_hi)
            .map(|(lo, hi)| hi - lo)
            .product()
    }

    pub fn macro_cell_volume(&self) -> f64 {
        self.omega_measure() / self.n_macro_cells() as f64
    }

    pub fn cell_cell_volume(&self) -> f64 {
        1.0 / self.n_cell_cells() as f64
    }

    pub fn macro_step(&self, axis: usize) -> f64 {
        (self.omega_hi[axis] - self.omega_lo[axis]) / self.n_x as f64
    }

    /// Midpoint of the macro cell with flat index `i`.
    pub fn macro_midpoint(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim_macro);
        let mut rest = i;
        for axis in 0..self.dim_macro {
            let k = rest % self.n_x;
            rest /= self.n_x;
            out.push(self.omega_lo[axis] + (k as f64 + 0.5) * self.macro_step(axis));
        }
        out
    }

    /// Midpoint of the cell-variable cell with flat index `j` (a point of Q).
    pub fn cell_midpoint(&self, j: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim_macro);
        let mut rest = j;
        for _ in 0..self.dim_macro {
            let k = rest % self.n_y;
            rest /= self.n_y;
            out.push((k as f64 + 0.5) / self.n_y as f64);
        }
        out
    }

    pub fn macro_points(&self) -> Points {
        Points::collect(self.dim_macro, self.n_macro_cells(), |i| self.macro_midpoint(i))
    }

    pub fn cell_points(&self) -> Points {
        Points::collect(self.dim_macro, self.n_cell_cells(), |j| self.cell_midpoint(j))
    }

    /// Flat macro-cell index of the cell containing `x`, if `x` lies in the closed box.
    pub fn macro_cell_of(&self, x: &[f64]) -> Option<usize> {
        let mut idx = 0;
        let mut stride = 1;
        for (axis, &xa) in x.iter().enumerate().take(self.dim_macro) {
            let t = (xa - self.omega_lo[axis]) / self.macro_step(axis);
            if !(t >= 0.0 && t <= self.n_x as f64) {
                return None;
            }
            let k = (t.floor() as usize).min(self.n_x - 1);
            idx += k * stride;
            stride *= self.n_x;
        }
        Some(idx)
    }
}

/// A flat list of points of fixed dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    fn collect(dim: usize, n: usize, f: impl Fn(usize) -> Vec<f64>) -> Self {
        let mut data = Vec::with_capacity(dim * n);
        for i in 0..n {
            data.extend(f(i));
        }
        Points { dim, data }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }
}

/// One state vector per macro cell: a discrete element of L^p(Ω; R^d).
#[derive(Debug, Clone, PartialEq)]
pub struct GridField {
    spec: GridSpec,
    values: Vec<f64>,
}

impl GridField {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        let expected = spec.n_macro_cells() * spec.dim_state;
        if values.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "field needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite field value in macro cell {}",
                pos / spec.dim_state
            )));
        }
        Ok(GridField { spec, values })
    }

    pub fn constant(spec: GridSpec, state: &[f64]) -> Result<Self> {
        if state.len() != spec.dim_state {
            return Err(Error::InvalidArgument("state vector has wrong length".into()));
        }
        let values = state.repeat(spec.n_macro_cells());
        Self::new(spec, values)
    }

    /// Samples `f` at every macro midpoint.
    pub fn from_fn(spec: GridSpec, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<Self> {
        let mut values = Vec::with_capacity(spec.n_macro_cells() * spec.dim_state);
        for x in spec.macro_points().iter() {
            let v = f(x);
            if v.len() != spec.dim_state {
                return Err(Error::InvalidArgument("sampler returned wrong state length".into()));
            }
            values.extend(v);
        }
        Self::new(spec, values)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize) -> &[f64] {
        let d = self.spec.dim_state;
        &self.values[i * d..(i + 1) * d]
    }

    pub fn len(&self) -> usize {
        self.spec.n_macro_cells()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

/// One state vector per (macro cell, cell-variable cell); Q-periodic in the
/// second index by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoScaleField {
    spec: GridSpec,
    values: Vec<f64>,
}

impl TwoScaleField {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        let expected = spec.n_macro_cells() * spec.n_cell_cells() * spec.dim_state;
        if values.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "two-scale field needs {expected} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite two-scale field value".into()));
        }
        Ok(TwoScaleField { spec, values })
    }

    /// Samples `f(x, y)` at every pair of macro and cell midpoints.
    pub fn from_fn(spec: GridSpec, f: impl Fn(&[f64], &[f64]) -> Vec<f64>) -> Result<Self> {
        let xs = spec.macro_points();
        let ys = spec.cell_points();
        let mut values = Vec::with_capacity(xs.len() * ys.len() * spec.dim_state);
        for x in xs.iter() {
            for y in ys.iter() {
                let v = f(x, y);
                if v.len() != spec.dim_state {
                    return Err(Error::InvalidArgument(
                        "sampler returned wrong state length".into(),
                    ));
                }
                values.extend(v);
            }
        }
        Self::new(spec, values)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Value at macro cell `i` and cell-variable cell `j`; `j` wraps periodically.
    pub fn value(&self, i: usize, j: usize) -> &[f64] {
        let d = self.spec.dim_state;
        let j = j % self.spec.n_cell_cells();
        let k = i * self.spec.n_cell_cells() + j;
        &self.values[k * d..(k + 1) * d]
    }
}

/// Componentwise fractional part `t - floor(t)`, in `[0, 1)^N`.
pub fn fractional_fold(t: &[f64]) -> Result<Vec<f64>> {
    t.iter()
        .map(|&s| {
            if s.is_finite() {
                Ok(fold_scalar(s))
            } else {
                Err(Error::InvalidArgument(format!("cannot fold non-finite value {s}")))
            }
        })
        .collect()
}

#[inline]
pub fn fold_scalar(s: f64) -> f64 {
    let r = s - s.floor();
    // tiny negative inputs round up to exactly 1.0
    if r >= 1.0 {
        0.0
    } else {
        r
    }
}

/// Midpoint-rule approximation of the integral of `sampler` over Ω.
pub fn quadrature(sampler: impl Fn(&[f64]) -> f64, spec: &GridSpec) -> Result<f64> {
    let mut terms = Vec::with_capacity(spec.n_macro_cells());
    for (i, x) in spec.macro_points().iter().enumerate() {
        let v = sampler(x);
        if v.is_nan() {
            return Err(Error::EvaluationFailure(format!(
                "integrand is NaN at macro cell {i}"
            )));
        }
        terms.push(v);
    }
    Ok(pairwise_sum(&terms) * spec.macro_cell_volume())
}

/// Largest duality-pairing discrepancy `max_phi |∫ (u - v)·phi dx|` over a
/// battery of scalar macro test functions, applied to every state component.
pub fn weak_lp_norm_gap(
    u: &GridField,
    v: &GridField,
    test_battery: &[&dyn Fn(&[f64]) -> f64],
) -> Result<f64> {
    if u.spec() != v.spec() {
        return Err(Error::InvalidArgument(
            "fields live on different grids".into(),
        ));
    }
    let spec = u.spec();
    let xs = spec.macro_points();
    let d = spec.dim_state;
    let mut worst: f64 = 0.0;
    for phi in test_battery {
        let weights: Vec<f64> = xs.iter().map(phi).collect();
        for c in 0..d {
            let terms: Vec<f64> = (0..xs.len())
                .map(|i| (u.value(i)[c] - v.value(i)[c]) * weights[i])
                .collect();
            let pairing = pairwise_sum(&terms) * spec.macro_cell_volume();
            worst = worst.max(pairing.abs());
        }
    }
    Ok(worst)
}
