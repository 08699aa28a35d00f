//! Functional derivative of the commutator observable: pointwise reads,
//! linearity and the centering of the observable.

mod common;

use common::*;
use homlab::correctors::HierarchyPair;
use homlab::elliptic::SolverSettings;
use homlab::ensemble::{MapKind, Sampler};
use homlab::grid::{MatrixField, Spectral};
use homlab::par::Execution;
use homlab::sensitivity::{commutator_observable, gateaux_check, observable, representation_derivative, TestFunction};
use homlab::stats::{mean, stderr_of_mean};

#[test]
fn single_cell_perturbation_reads_one_entry() {
    let a = sample(2, 32, MapKind::SkewLogistic, 11);
    let grid = a.grid();
    let spectral = Spectral::new(grid);
    let settings = SolverSettings::new(1e-13, 2000).unwrap();
    let g = TestFunction::centered(grid, 5.0).unwrap();
    let pair = HierarchyPair::build(&a, &spectral, 1, settings, Execution::Sequential).unwrap();
    let deriv = representation_derivative(&pair, &spectral, &g, 0, 1, 1, settings).unwrap();
    // One cell inside the support, one just outside it where only grad h acts.
    for (cell, entry) in [([17i64, 15i64], (0, 1)), ([16, 25], (1, 1))] {
        let idx = grid.index(&cell);
        let mut delta = MatrixField::zeros(grid);
        delta.entry_mut(entry.0, entry.1)[idx] = 1.0;
        let read = deriv.at(idx)[entry.0 * 2 + entry.1];
        assert!((deriv.contract(&delta).unwrap() - read).abs() <= 1e-14 * read.abs().max(1.0));
        let table = gateaux_check(&a, &spectral, &g, 0, 1, 1, &delta, &[1e-4], settings).unwrap();
        let row = table.rows[0];
        assert!((row.rhs - read).abs() <= 1e-14 * read.abs().max(1.0));
        assert!(row.rel_error <= 1e-3, "{row:?}");
    }
}

#[test]
fn observable_is_linear_in_the_test_function() {
    let a = sample(2, 32, MapKind::ScalarLogistic, 12);
    let grid = a.grid();
    let spectral = Spectral::new(grid);
    let pair = HierarchyPair::build(&a, &spectral, 1, SolverSettings::default(), Execution::Sequential).unwrap();
    let xi = homlab::commutator::standard_commutator_entry(&pair, 1, 0, 0).unwrap();
    let g1 = TestFunction::centered(grid, 4.0).unwrap();
    let g2 = TestFunction::new(grid, 6.0, &[3, 20]).unwrap();
    let (alpha, beta) = (0.7, -1.9);
    let combo: Vec<f64> =
        g1.values().values().iter().zip(g2.values().values()).map(|(u, v)| alpha * u + beta * v).collect();
    let lhs: f64 = combo.iter().zip(xi.values()).map(|(c, x)| c * x).sum();
    let rhs = alpha * observable(&g1, &xi).unwrap() + beta * observable(&g2, &xi).unwrap();
    assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    assert_eq!(commutator_observable(&pair, &g1, 0, 0, 1).unwrap(), observable(&g1, &xi).unwrap());
}

#[test]
fn observable_has_zero_ensemble_mean() {
    let spec = ensemble(2, 16, MapKind::SkewLogistic, 13);
    let sampler = Sampler::new(spec);
    let g = TestFunction::new(spec.grid, 4.0, &[3, 5]).unwrap();
    let settings = SolverSettings::new(1e-9, 1000).unwrap();
    for (i, j) in [(0, 0), (0, 1)] {
        let values = Execution::Parallel
            .try_map(256, |s| {
                let a = sampler.coefficients(s as u64);
                let pair = HierarchyPair::build(&a, sampler.spectral(), 1, settings, Execution::Sequential)?;
                commutator_observable(&pair, &g, i, j, 1)
            })
            .unwrap();
        let (m, se) = (mean(&values), stderr_of_mean(&values));
        assert!(m.abs() <= 3.0 * se, "({i},{j}): mean {m}, se {se}");
    }
}
