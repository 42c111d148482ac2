use std::f64::consts::PI;

use oscillab::cellhom::{cell_infimum, CellProblem};
use oscillab::integrands::{EnvelopeTable, IntegrandF, NonlocalW};
use oscillab::lattice::{fold_scalar, fractional_fold, quadrature, GridField, GridSpec, TwoScaleField};
use oscillab::nonlocal::{eval_i_eps, eval_i_hom_objective, minimize_i_hom_k_schedule, Deformation, NonlocalOptions};
use oscillab::numerics::project_simplex;
use oscillab::ymeasure::{
    average_over_x, convex_combination, dirac_lift, from_csv, glue, periodic_shift_measure, to_csv, underlying_deformation,
    AtomicYoungMeasure,
};
use oscillab::Error;
use proptest::prelude::*;

fn unit(n_x: usize, n_y: usize) -> GridSpec {
    GridSpec::unit_1d(n_x, n_y).unwrap()
}

fn weight_sums(nu: &AtomicYoungMeasure) -> Vec<f64> {
    (0..nu.n_cells())
        .map(|c| (0..nu.atoms_per_cell()).map(|k| nu.weight(c, k)).sum())
        .collect()
}

fn two_atom_measure(spec: &GridSpec, atoms: &[f64], raw: &[f64]) -> AtomicYoungMeasure {
    let mut weights = raw.to_vec();
    for pair in weights.chunks_mut(2) {
        let s = pair[0] + pair[1];
        pair[0] /= s;
        pair[1] = 1.0 - pair[0];
    }
    AtomicYoungMeasure::new(spec.clone(), 2, atoms.to_vec(), weights).unwrap()
}

fn square(y: &[f64]) -> Vec<f64> {
    vec![if y[0].rem_euclid(2.0) < 1.0 { 1.0 } else { -1.0 }]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn constructions_stay_normalized(
        vals in prop::collection::vec(-3.0f64..3.0, 32),
        offset in -1.0f64..1.0,
        quarter in 1usize..4,
        periods in 1usize..4,
    ) {
        let s = unit(4, 8);
        let lift = dirac_lift(&TwoScaleField::new(s.clone(), vals).unwrap());
        let flat = dirac_lift(&TwoScaleField::from_fn(s.clone(), move |_, _| vec![offset]).unwrap());
        let shifted = periodic_shift_measure(&square, &[offset], 2, &s, 8).unwrap();
        let sin = periodic_shift_measure(&|y: &[f64]| vec![(2.0 * PI * y[0]).sin()], &[0.0], periods, &s, 8).unwrap();
        let built = [
            lift.clone(),
            sin,
            average_over_x(&lift),
            glue(&shifted, &flat, &[0, 3]).unwrap(),
            convex_combination(&shifted, &flat, quarter as f64 / 4.0).unwrap(),
        ];
        for nu in &built {
            for s in weight_sums(nu) {
                prop_assert!((s - 1.0).abs() <= 1e-12);
            }
            prop_assert!(nu.validate().is_ok());
        }
    }

    #[test]
    fn glue_refuses_different_deformations(a in -2.0f64..2.0, delta in 1e-6f64..1.0, cell in 0usize..4) {
        let s = unit(4, 2);
        let mu = dirac_lift(&TwoScaleField::from_fn(s.clone(), move |_, _| vec![a]).unwrap());
        let nu = dirac_lift(&TwoScaleField::from_fn(s.clone(), move |_, _| vec![a + delta]).unwrap());
        prop_assert!(matches!(glue(&mu, &nu, &[cell]), Err(Error::PreconditionViolation(_))));
    }

    #[test]
    fn glue_keeps_the_deformation(a in -2.0f64..2.0, spread in 0.0f64..2.0, region in prop::collection::btree_set(0usize..4, 0..4)) {
        let s = unit(4, 2);
        let pm = periodic_shift_measure(&move |y: &[f64]| vec![spread * square(y)[0]], &[a], 2, &s, 8).unwrap();
        let flat = dirac_lift(&TwoScaleField::from_fn(s.clone(), move |_, _| vec![a]).unwrap());
        let region: Vec<usize> = region.into_iter().collect();
        let g = glue(&pm, &flat, &region).unwrap();
        for v in underlying_deformation(&g).values() {
            prop_assert!((v - a).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn hom_objective_ignores_atom_labels(
        atoms in prop::collection::vec(-2.0f64..2.0, 16),
        raw in prop::collection::vec(0.05f64..1.0, 16),
        name in prop::sample::select(vec!["quadratic", "double_well", "tilted_weighted", "weighted_coupled"]),
    ) {
        let s = unit(2, 4);
        let w = NonlocalW::catalog(name).unwrap();
        let nu = two_atom_measure(&s, &atoms, &raw);
        let mut a2 = nu.atoms().to_vec();
        let mut w2 = nu.weights().to_vec();
        for c in 0..nu.n_cells() {
            a2.swap(2 * c, 2 * c + 1);
            w2.swap(2 * c, 2 * c + 1);
        }
        let relabeled = AtomicYoungMeasure::new(s, 2, a2, w2).unwrap();
        let v = eval_i_hom_objective(&w, &nu).unwrap();
        let r = eval_i_hom_objective(&w, &relabeled).unwrap();
        prop_assert!((v - r).abs() <= 1e-12 * (1.0 + v.abs()));
    }

    #[test]
    fn i_eps_is_invariant_under_argument_swap(vals in prop::collection::vec(-2.0f64..2.0, 16)) {
        // the double integral over Ω×Ω is unchanged when W's arguments are exchanged
        let s = unit(16, 4);
        let u = GridField::new(s, vals).unwrap();
        let w = NonlocalW::catalog("weighted_coupled").unwrap();
        let swapped = NonlocalW::new("swapped", 0.0, 0.0, 4.0, 2.0, {
            let w = w.clone();
            move |a| w.eval(&a.swapped())
        });
        let a = eval_i_eps(&w, &u, 0.25).unwrap();
        let b = eval_i_eps(&swapped, &u, 0.25).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
    }

    #[test]
    fn quadrature_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, k in 0.1f64..6.0, n in 1usize..64) {
        let s = unit(n, 1);
        let f = move |x: &[f64]| (k * x[0]).cos();
        let g = |x: &[f64]| x[0].exp();
        let lhs = quadrature(|x| a * f(x) + b * g(x), &s).unwrap();
        let rhs = a * quadrature(f, &s).unwrap() + b * quadrature(g, &s).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn fold_is_one_periodic(t in -100.0f64..100.0, k in -50i32..50) {
        let a = fold_scalar(t);
        let b = fold_scalar(t + k as f64);
        prop_assert!((0.0..1.0).contains(&a));
        let d = (a - b).abs();
        prop_assert!(d <= 1e-9 || d >= 1.0 - 1e-9);
        let v = fractional_fold(&[t, t + k as f64]).unwrap();
        prop_assert!(v.iter().all(|x| (0.0..1.0).contains(x)));
    }

    #[test]
    fn simplex_projection_lands_on_the_simplex(mut w in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        project_simplex(&mut w);
        prop_assert!(w.iter().all(|&x| x >= 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cell_value_is_bounded_by_the_zero_competitor(
        xi in -2.0f64..2.0,
        name in prop::sample::select(vec!["quadratic", "weighted_quadratic", "double_well", "tilted_weighted"]),
        subcells in prop::sample::select(vec![4usize, 8, 16]),
    ) {
        let f = IntegrandF::catalog(name).unwrap();
        let prob = CellProblem::new(f, vec![xi], 1, subcells).unwrap();
        let v = cell_infimum(&prob, 5).unwrap();
        let zero = prob.objective(&vec![0.0; subcells]);
        prop_assert!(v <= zero + 1e-12 * (1.0 + zero.abs()));
    }

    #[test]
    fn convex_envelope_is_below_and_exact_for_convex(xi in -1.9f64..1.9, y in 0.0f64..1.0) {
        let grid = EnvelopeTable::default_grid((-2.0, 2.0), 200);
        for name in ["weighted_quadratic", "double_well"] {
            let f = IntegrandF::catalog(name).unwrap();
            let table = EnvelopeTable::build(&f, &[vec![y]], grid.clone()).unwrap();
            let co = table.eval(&f, 0, xi);
            let fv = f.eval(&[y], &[xi]);
            prop_assert!(co <= fv + 1e-12 * (1.0 + fv.abs()));
            if name == "weighted_quadratic" {
                prop_assert!((co - fv).abs() <= 1e-12 * (1.0 + fv.abs()));
            }
        }
    }

    #[test]
    fn measure_csv_round_trips(atoms in prop::collection::vec(-3.0f64..3.0, 16), raw in prop::collection::vec(0.05f64..1.0, 16)) {
        let s = unit(2, 4);
        let nu = two_atom_measure(&s, &atoms, &raw);
        let back = from_csv(&s, &to_csv(&nu)).unwrap();
        prop_assert_eq!(back, nu);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 6, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn hom_minimum_is_monotone_in_k(seed in 0u64..1_000, name in prop::sample::select(vec!["double_well", "weighted_coupled"])) {
        let w = NonlocalW::catalog(name).unwrap();
        let s = unit(2, 2);
        let sched = minimize_i_hom_k_schedule(&w, &Deformation::Free, &[1, 2, 3, 4], &s, seed, &NonlocalOptions::default()).unwrap();
        for p in sched.windows(2) {
            prop_assert!(p[1].value <= p[0].value + 1e-12 * (1.0 + p[0].value.abs()));
        }
    }
}
