//! Layered media `a = s(x_1) Id` against the one-dimensional recurrence.

mod common;

use common::*;
use homlab::commutator::standard_commutator_entry;
use homlab::correctors::HierarchyPair;
use homlab::elliptic::SolverSettings;
use homlab::grid::{MatrixField, MultiIndex, ScalarField, Spectral, TorusGrid};
use homlab::par::Execution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Corrector of `-(s (phi' + 1))' = 0` on a periodic line: the flux
/// `s (phi(x+1) - phi(x) + 1)` equals the harmonic mean `H` everywhere, so
/// `phi(x+1) = phi(x) + H / s(x) - 1`.
fn line_corrector(s: &[f64]) -> (Vec<f64>, f64) {
    let m = s.len() as f64;
    let harmonic = m / s.iter().map(|v| 1.0 / v).sum::<f64>();
    let mut phi = vec![0.0; s.len()];
    for x in 0..s.len() - 1 {
        phi[x + 1] = phi[x] + harmonic / s[x] - 1.0;
    }
    let mean = phi.iter().sum::<f64>() / m;
    phi.iter_mut().for_each(|v| *v -= mean);
    (phi, harmonic)
}

#[test]
fn layered_media_closed_forms() {
    let side = 32;
    let grid = TorusGrid::new(2, side).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let profile: Vec<f64> = (0..side).map(|_| rng.random_range(0.2..1.0)).collect();
    let scale = ScalarField::from_fn(grid, |c| profile[c[0]]);
    let a = MatrixField::isotropic(&scale);
    let spectral = Spectral::new(grid);
    let pair = HierarchyPair::build(&a, &spectral, 1, SolverSettings::default(), Execution::Sequential).unwrap();
    let (phi_line, harmonic) = line_corrector(&profile);
    let arithmetic = profile.iter().sum::<f64>() / side as f64;

    let abar = pair.primal().abar(&MultiIndex::empty()).unwrap();
    assert!((abar[0] - harmonic).abs() <= 1e-8);
    assert!((abar[3] - arithmetic).abs() <= 1e-8);
    assert!(abar[1].abs() <= 1e-8 && abar[2].abs() <= 1e-8);

    let phi1 = &pair.primal().entry(&MultiIndex::new(vec![0])).unwrap().phi;
    let expect: Vec<f64> = (0..grid.len()).map(|k| phi_line[grid.coords(k)[0]]).collect();
    assert!(max_abs_diff(phi1.values(), &expect) <= 1e-8);
    let phi2 = &pair.primal().entry(&MultiIndex::new(vec![1])).unwrap().phi;
    assert!(phi2.max_abs() <= 1e-8);

    // Xi_11 = (s - H)(d_1 phi + 1) = -H d_1 phi, since s (d_1 phi + 1) = H.
    let xi = standard_commutator_entry(&pair, 1, 0, 0).unwrap();
    let d1 = fwd(&expect, side, 2, 0);
    let oracle: Vec<f64> = d1.iter().map(|v| -harmonic * v).collect();
    assert!(max_abs_diff(xi.values(), &oracle) <= 1e-8);
    // The second direction sees a homogeneous medium column by column.
    let xi22 = standard_commutator_entry(&pair, 1, 1, 1).unwrap();
    let oracle22: Vec<f64> = (0..grid.len()).map(|k| profile[grid.coords(k)[0]] - arithmetic).collect();
    assert!(max_abs_diff(xi22.values(), &oracle22) <= 1e-8);
}
