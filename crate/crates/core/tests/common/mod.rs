//! Independent brute-force oracles shared by the integration tests. Nothing
//! here calls the library's stencils or solvers; indices are computed by hand.

#![allow(dead_code)]

use homlab::ensemble::{CoefficientMap, EnsembleSpec, MapKind, Sampler, SpectralCovariance};
use homlab::grid::{MatrixField, ScalarField, TorusGrid};
use nalgebra::{DMatrix, DVector};

/// Row-major index of integer coordinates, wrapped periodically.
pub fn wrap_index(side: usize, coords: &[i64]) -> usize {
    let m = side as i64;
    coords.iter().fold(0usize, |acc, &c| acc * side + c.rem_euclid(m) as usize)
}

pub fn coords_of(side: usize, dim: usize, mut idx: usize) -> Vec<i64> {
    let mut out = vec![0i64; dim];
    for k in (0..dim).rev() {
        out[k] = (idx % side) as i64;
        idx /= side;
    }
    out
}

/// Index of the neighbour `idx + step e_axis`.
pub fn neighbour(side: usize, dim: usize, idx: usize, axis: usize, step: i64) -> usize {
    let mut c = coords_of(side, dim, idx);
    c[axis] += step;
    wrap_index(side, &c)
}

pub fn fwd(u: &[f64], side: usize, dim: usize, axis: usize) -> Vec<f64> {
    (0..u.len()).map(|x| u[neighbour(side, dim, x, axis, 1)] - u[x]).collect()
}

pub fn bwd(u: &[f64], side: usize, dim: usize, axis: usize) -> Vec<f64> {
    (0..u.len()).map(|x| u[x] - u[neighbour(side, dim, x, axis, -1)]).collect()
}

/// Dense matrix of `u -> -sum_r D-_r sum_c a_rc D+_c u`.
pub fn dense_operator(a: &MatrixField) -> DMatrix<f64> {
    let grid = a.grid();
    let (side, dim, n) = (grid.side(), grid.dim(), grid.len());
    let mut m = DMatrix::zeros(n, n);
    for x in 0..n {
        for r in 0..dim {
            // flux_r(y) = sum_c a_rc(y) (u(y + e_c) - u(y)); out(x) -= flux_r(x) - flux_r(x - e_r)
            for (y, sign) in [(x, -1.0), (neighbour(side, dim, x, r, -1), 1.0)] {
                for c in 0..dim {
                    let w = a.entry(r, c)[y];
                    m[(x, neighbour(side, dim, y, c, 1))] += sign * w;
                    m[(x, y)] -= sign * w;
                }
            }
        }
    }
    m
}

/// Mean-zero solution of `A u = b` for a mean-zero `b`, through the
/// nonsingular `A + 1 1^T / n`.
pub fn dense_solve(op: &DMatrix<f64>, b: &[f64]) -> Vec<f64> {
    let n = b.len();
    let pinned = op + DMatrix::from_element(n, n, 1.0 / n as f64);
    let sol = pinned.lu().solve(&DVector::from_column_slice(b)).expect("pinned operator is invertible");
    sol.iter().cloned().collect()
}

/// `sum_r D-_r F_r`.
pub fn divergence(f: &[Vec<f64>], side: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; f[0].len()];
    for (r, comp) in f.iter().enumerate() {
        for (o, v) in out.iter_mut().zip(bwd(comp, side, dim, r)) {
            *o += v;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn ensemble(dim: usize, side: usize, kind: MapKind, seed: u64) -> EnsembleSpec {
    EnsembleSpec {
        covariance: SpectralCovariance::stable(1.0, 2.0, 1.0).unwrap(),
        map: CoefficientMap::new(0.2, kind, 1.5, 0.8).unwrap(),
        grid: TorusGrid::new(dim, side).unwrap(),
        seed,
    }
}

pub fn sample(dim: usize, side: usize, kind: MapKind, seed: u64) -> MatrixField {
    Sampler::new(ensemble(dim, side, kind, seed)).coefficients(0)
}

pub fn scalar(grid: TorusGrid, values: Vec<f64>) -> ScalarField {
    ScalarField::from_vec(grid, values).unwrap()
}
