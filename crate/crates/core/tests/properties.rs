//! Property-based invariants of the lattice calculus, the ensemble map and
//! the corrector construction.

use homlab::correctors::CorrectorHierarchy;
use homlab::elliptic::{apply_operator, SolverSettings};
use homlab::ensemble::{apply_map, CoefficientMap, MapKind};
use homlab::grid::{
    adjoint_div, forward_diff, gradient, iterated_partial, MatrixField, MultiIndex, ScalarField, Spectral,
    TorusGrid, VectorField,
};
use homlab::par::Execution;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn grid_strategy() -> impl Strategy<Value = TorusGrid> {
    prop_oneof![Just((2usize, 8usize)), Just((2, 16)), Just((3, 8))].prop_map(|(d, m)| TorusGrid::new(d, m).unwrap())
}

fn field(grid: TorusGrid, values: &[f64]) -> ScalarField {
    ScalarField::from_vec(grid, values.iter().cycle().take(grid.len()).cloned().collect()).unwrap()
}

fn values() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..64)
}

fn kind() -> impl Strategy<Value = MapKind> {
    prop_oneof![Just(MapKind::ScalarLogistic), Just(MapKind::SkewLogistic)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn summation_by_parts(grid in grid_strategy(), u in values(), f in values(), shift in 0usize..7) {
        let u = field(grid, &u);
        let comps: Vec<Vec<f64>> = (0..grid.dim())
            .map(|k| f.iter().cycle().skip(shift + k).take(grid.len()).cloned().collect())
            .collect();
        let flux = VectorField::from_components(grid, comps).unwrap();
        let lhs = u.dot(&adjoint_div(&flux));
        let rhs = -gradient(&u).dot(&flux);
        let scale = u.norm() * flux.dot(&flux).sqrt() * 4.0;
        prop_assert!((lhs - rhs).abs() <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn partials_commute(grid in grid_strategy(), u in values(), idx in prop::collection::vec(0usize..3, 0..4)) {
        let axes: Vec<usize> = idx.into_iter().map(|a| a % grid.dim()).collect();
        let mut reversed = axes.clone();
        reversed.reverse();
        let (fwd_order, rev_order) = (MultiIndex::new(axes), MultiIndex::new(reversed));
        // Integer-valued fields make every difference exact, so the shifts
        // commute bit for bit; real-valued ones agree up to rounding.
        let whole: Vec<f64> = u.iter().map(|v| (v * 1000.0).round()).collect();
        let w = field(grid, &whole);
        let a = iterated_partial(&w, &fwd_order).unwrap();
        let b = iterated_partial(&w, &rev_order).unwrap();
        prop_assert_eq!(a.values(), b.values());
        let u = field(grid, &u);
        let a = iterated_partial(&u, &fwd_order).unwrap();
        let b = iterated_partial(&u, &rev_order).unwrap();
        let err = a.values().iter().zip(b.values()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-12 * 16.0 * u.max_abs().max(1.0));
    }

    #[test]
    fn operators_commute_with_translations(grid in grid_strategy(), u in values(), s in prop::collection::vec(-9i64..9, 3)) {
        let u = field(grid, &u);
        let shift = &s[..grid.dim()];
        for axis in 0..grid.dim() {
            let moved_then_diff = forward_diff(&u.translated(shift), axis).unwrap();
            let diff_then_moved = forward_diff(&u, axis).unwrap().translated(shift);
            prop_assert_eq!(moved_then_diff.values(), diff_then_moved.values());
        }
        let period: Vec<i64> = vec![grid.side() as i64; grid.dim()];
        let wrapped = u.translated(&period);
        prop_assert_eq!(wrapped.values(), u.values());
    }

    #[test]
    fn fourier_round_trip(grid in grid_strategy(), u in values()) {
        let u = field(grid, &u);
        let spectral = Spectral::new(grid);
        let back = spectral.inverse_real(spectral.forward_real(u.values()));
        let err = back.iter().zip(u.values()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        prop_assert!(err <= 1e-12 * u.max_abs().max(1.0));
    }

    #[test]
    fn coefficient_map_is_elliptic(
        g in -50.0f64..50.0,
        lambda in 0.05f64..0.95,
        steepness in 0.1f64..5.0,
        skew in 0.0f64..=1.0,
        kind in kind(),
        dim in 2usize..=3,
    ) {
        let map = CoefficientMap::new(lambda, kind, steepness, skew).unwrap();
        let a = DMatrix::from_row_slice(dim, dim, &map.matrix(dim, g));
        let inv = a.clone().try_inverse().unwrap();
        for k in 0..dim {
            let mut unit = DMatrix::zeros(dim, 1);
            unit[(k, 0)] = 1.0;
            for xi in [unit, DMatrix::from_element(dim, 1, 1.0)] {
                let n2 = xi.norm_squared();
                prop_assert!((xi.transpose() * &a * &xi)[(0, 0)] >= lambda * n2 * (1.0 - 1e-12));
                prop_assert!((xi.transpose() * &inv * &xi)[(0, 0)] >= n2 * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn symmetric_operator_is_self_adjoint(u in values(), v in values(), gs in values()) {
        let grid = TorusGrid::new(2, 8).unwrap();
        let map = CoefficientMap::scalar(0.3, 1.0).unwrap();
        let a = apply_map(&map, &field(grid, &gs));
        let (u, v) = (field(grid, &u), field(grid, &v));
        let lhs = v.dot(&apply_operator(&a, &u).unwrap());
        let rhs = u.dot(&apply_operator(&a, &v).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (lhs.abs() + rhs.abs()).max(1.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn flux_correctors_are_skew_and_centred(gs in values(), kind in kind(), dim in 2usize..=3) {
        let grid = TorusGrid::new(dim, 8).unwrap();
        let map = CoefficientMap::new(0.2, kind, 1.0, 0.7).unwrap();
        let scaled: Vec<f64> = gs.iter().map(|v| v / 4.0).collect();
        let a: MatrixField = apply_map(&map, &field(grid, &scaled));
        let spectral = Spectral::new(grid);
        let h = CorrectorHierarchy::build(&a, &spectral, grid.hierarchy_depth(), SolverSettings::default(), Execution::Sequential).unwrap();
        for level in 1..=h.depth() {
            for e in h.level(level) {
                for r in 0..dim {
                    for c in 0..dim {
                        let (s, t) = (e.sigma.entry(r, c), e.sigma.entry(c, r));
                        prop_assert!(s.values().iter().zip(t.values()).all(|(x, y)| x + y == 0.0));
                    }
                }
                prop_assert!(e.flux_residual <= 1e-10);
                for comp in e.grad_phi().components() {
                    prop_assert!((comp.iter().sum::<f64>() / comp.len() as f64).abs() <= 1e-12);
                }
                for comp in e.sigma.div().components() {
                    prop_assert!((comp.iter().sum::<f64>() / comp.len() as f64).abs() <= 1e-12);
                }
            }
        }
    }
}
