//! Small numerical kernels shared by the solvers: deterministic summation,
//! projected Armijo descent, simplex projection and bracketed scalar
//! minimization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed-order pairwise summation; the result depends only on the order of `xs`.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const LEAF: usize = 16;
    if xs.len() <= LEAF {
        let mut acc = 0.0;
        for &x in xs {
            acc += x;
        }
        acc
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Euclidean projection onto the probability simplex, in place.
pub fn project_simplex(w: &mut [f64]) {
    if w.is_empty() {
        return;
    }
    let mut sorted: Vec<f64> = w.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (i, &s) in sorted.iter().enumerate() {
        cumsum += s;
        let candidate = (cumsum - 1.0) / (i + 1) as f64;
        if s - candidate > 0.0 {
            theta = candidate;
        }
    }
    for v in w.iter_mut() {
        *v = (*v - theta).max(0.0);
    }
    // renormalize away the last ulp of drift
    let total: f64 = w.iter().sum();
    if total > 0.0 {
        for v in w.iter_mut() {
            *v /= total;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentOptions {
    pub max_iter: usize,
    /// Stop when the metric-weighted RMS of the projected gradient mapping drops below this.
    pub grad_tol: f64,
    pub initial_step: f64,
    pub armijo: f64,
    pub min_step: f64,
}

impl Default for DescentOptions {
    fn default() -> Self {
        DescentOptions {
            max_iter: 5000,
            grad_tol: 1e-8,
            initial_step: 0.5,
            armijo: 1e-4,
            min_step: 1e-14,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescentOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Objective, metric gradient and feasibility projection of a descent problem.
///
/// `gradient` must return the Riesz representative of the derivative in the
/// diagonal metric given by `metric` (Euclidean gradient divided by the metric
/// weight), so that `x - t g` is a sensible trial point for steps near 1.
pub trait DescentProblem {
    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], g: &mut [f64]);
    fn project(&self, _x: &mut [f64]) {}
    fn metric(&self, _i: usize) -> f64 {
        1.0
    }
}

fn weighted_rms<P: DescentProblem + ?Sized>(problem: &P, r: &[f64]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &v) in r.iter().enumerate() {
        let m = problem.metric(i);
        num += m * v * v;
        den += m;
    }
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        0.0
    }
}

/// Stationarity measure `|P(x - g) - x|` in the problem metric.
pub fn projected_gradient_norm<P: DescentProblem + ?Sized>(problem: &P, x: &[f64], g: &[f64]) -> f64 {
    let mut trial: Vec<f64> = x.iter().zip(g).map(|(a, b)| a - b).collect();
    problem.project(&mut trial);
    let r: Vec<f64> = trial.iter().zip(x).map(|(a, b)| a - b).collect();
    weighted_rms(problem, &r)
}

/// One backtracking step along the projection arc `t -> P(x - t g)`.
///
/// Returns the accepted point and its value, or `None` when no step above
/// `min_step` gives sufficient decrease.
pub fn armijo_step<P: DescentProblem + ?Sized>(
    problem: &P,
    x: &[f64],
    value: f64,
    g: &[f64],
    opts: &DescentOptions,
) -> Option<(Vec<f64>, f64)> {
    let mut t = opts.initial_step;
    let mut trial = vec![0.0; x.len()];
    while t >= opts.min_step {
        for ((tr, &xi), &gi) in trial.iter_mut().zip(x).zip(g) {
            *tr = xi - t * gi;
        }
        problem.project(&mut trial);
        let new_value = problem.objective(&trial);
        if new_value.is_finite() {
            // ∇J·(x_t - x) with ∇J_i = metric_i * g_i
            let mut slope = 0.0;
            for (i, ((&tr, &xi), &gi)) in trial.iter().zip(x).zip(g).enumerate() {
                slope += problem.metric(i) * gi * (tr - xi);
            }
            if new_value <= value + opts.armijo * slope && new_value < value {
                return Some((trial, new_value));
            }
        }
        t *= 0.5;
    }
    None
}

/// Projected gradient descent with Armijo backtracking from `opts.initial_step`.
pub fn projected_gradient_descent<P: DescentProblem + ?Sized>(
    problem: &P,
    x0: Vec<f64>,
    opts: &DescentOptions,
) -> DescentOutcome {
    let mut x = x0;
    problem.project(&mut x);
    let mut value = problem.objective(&x);
    let mut g = vec![0.0; x.len()];
    if !value.is_finite() {
        return DescentOutcome {
            x,
            value,
            iterations: 0,
            converged: false,
        };
    }
    for iter in 0..opts.max_iter {
        problem.gradient(&x, &mut g);
        if g.iter().any(|v| !v.is_finite()) {
            return DescentOutcome {
                x,
                value,
                iterations: iter,
                converged: false,
            };
        }
        if projected_gradient_norm(problem, &x, &g) < opts.grad_tol {
            return DescentOutcome {
                x,
                value,
                iterations: iter,
                converged: true,
            };
        }
        match armijo_step(problem, &x, value, &g, opts) {
            Some((next, next_value)) => {
                x = next;
                value = next_value;
            }
            // no representable decrease left: stationary up to round-off
            None => {
                return DescentOutcome {
                    x,
                    value,
                    iterations: iter,
                    converged: true,
                }
            }
        }
    }
    DescentOutcome {
        x,
        value,
        iterations: opts.max_iter,
        converged: false,
    }
}

/// Result of a bracketed scalar minimization.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarMin {
    pub x: f64,
    pub value: f64,
    /// The best scan point sat on an end of the interval.
    pub at_boundary: bool,
}

/// Global-ish minimization of a scalar function on `[lo, hi]`: a uniform scan
/// followed by golden-section refinement around the best scan point.
pub fn minimize_scalar(f: impl Fn(f64) -> f64, lo: f64, hi: f64, scan: usize) -> ScalarMin {
    let scan = scan.max(3);
    let h = (hi - lo) / (scan - 1) as f64;
    let mut best = 0;
    let mut best_val = f64::INFINITY;
    for i in 0..scan {
        let v = f(lo + i as f64 * h);
        if v < best_val {
            best_val = v;
            best = i;
        }
    }
    let at_boundary = best == 0 || best == scan - 1;
    let mut a = lo + best.saturating_sub(1) as f64 * h;
    let mut b = lo + (best + 1).min(scan - 1) as f64 * h;
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..200 {
        if (b - a).abs() <= 1e-13 * (1.0 + a.abs().max(b.abs())) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let xm = 0.5 * (a + b);
    let vm = f(xm);
    let (x, value) = [(xm, vm), (c, fc), (d, fd), (lo + best as f64 * h, best_val)]
        .into_iter()
        .filter(|(_, v)| v.is_finite())
        .fold((f64::NAN, f64::INFINITY), |acc, (x, v)| if v < acc.1 { (x, v) } else { acc });
    ScalarMin {
        x,
        value,
        at_boundary,
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn linear_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pairwise_matches_naive_on_exact_values() {
        let xs: Vec<f64> = (0..1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 499500.0);
        assert_eq!(pairwise_sum(&[]), 0.0);
    }

    #[test]
    fn simplex_projection_examples() {
        let mut w = vec![0.5, 0.5];
        project_simplex(&mut w);
        assert_eq!(w, vec![0.5, 0.5]);
        let mut w = vec![2.0, 0.0];
        project_simplex(&mut w);
        assert_eq!(w, vec![1.0, 0.0]);
        let mut w = vec![0.2, 0.2, 0.2];
        project_simplex(&mut w);
        for v in &w {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn simplex_projection_is_feasible_and_idempotent(w in prop::collection::vec(-5.0f64..5.0, 1..10)) {
            let mut p = w.clone();
            project_simplex(&mut p);
            prop_assert!(p.iter().all(|&v| v >= 0.0));
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut q = p.clone();
            project_simplex(&mut q);
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    struct MeanZeroQuadratic {
        a: Vec<f64>,
        xi: f64,
    }

    impl DescentProblem for MeanZeroQuadratic {
        fn objective(&self, v: &[f64]) -> f64 {
            let n = v.len() as f64;
            v.iter().zip(&self.a).map(|(vi, ai)| ai * (self.xi + vi).powi(2)).sum::<f64>() / n
        }
        fn gradient(&self, v: &[f64], g: &mut [f64]) {
            for ((gi, vi), ai) in g.iter_mut().zip(v).zip(&self.a) {
                *gi = 2.0 * ai * (self.xi + vi);
            }
        }
        fn project(&self, v: &mut [f64]) {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter_mut().for_each(|x| *x -= mean);
        }
    }

    #[test]
    fn descent_solves_weighted_mean_zero_quadratic() {
        // optimum: xi^2 / mean(1/a)
        let a = vec![1.0, 2.0, 4.0, 3.0];
        let hm = 1.0 / (a.iter().map(|x| 1.0 / x).sum::<f64>() / 4.0);
        let prob = MeanZeroQuadratic { a, xi: 1.5 };
        let out = projected_gradient_descent(&prob, vec![0.3, -0.1, 0.7, 0.0], &DescentOptions::default());
        assert!(out.converged);
        assert!((out.value - 2.25 * hm).abs() < 1e-12, "{}", out.value);
    }

    #[test]
    fn scalar_minimization() {
        let r = minimize_scalar(|x| (x - 0.3).powi(2) + 1.0, -4.0, 4.0, 101);
        assert!((r.x - 0.3).abs() < 1e-6);
        assert!(!r.at_boundary);
        let r = minimize_scalar(|x| -x, -1.0, 1.0, 11);
        assert!(r.at_boundary);
        assert!((r.x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn slope_of_line() {
        let xs = [0.0, 1.0, 2.0];
        let ys = [1.0, 3.0, 5.0];
        assert!((linear_slope(&xs, &ys) - 2.0).abs() < 1e-15);
    }
}
