//! Higher-order homogenization commutators.
//!
//! For a gradient `grad w`,
//!
//! ```text
//! Xi^n[grad w] = (a - abar^1) grad w - sum_{k=2..n} abar^k_{i_1..i_{k-1}} D_{i_1..i_{k-1}} grad w
//! ```
//!
//! and the standard commutator of order `n` is
//!
//! ```text
//! Xi^{o,n}_ij = e_j . (a - abar^1)(grad phi_i + e_i)
//!             - sum_{k=2..n} (-1)^(k-1) abar^{*,k}_{j i_1..i_{k-2}} e_{i_{k-1}} . D_{i_1..i_{k-1}} grad phi_i
//! ```
//!
//! with the dual coefficients `abar^{*,k}` taken from the hierarchy of the
//! transposed field.

use serde::Serialize;

use crate::correctors::{CorrectorHierarchy, HierarchyPair};
use crate::elliptic::SolverSettings;
use crate::ensemble::{EnsembleSpec, Sampler};
use crate::error::{Error, Result};
use crate::grid::{gradient, iterated_partial, MatrixField, MultiIndex, ScalarField, TorusGrid, VectorField};
use crate::par::Execution;
use crate::stats::{mean, stderr_of_mean};

fn check_order(n: usize, depth: usize) -> Result<()> {
    if n == 0 || n > depth {
        Err(Error::param(format!("commutator order {n} outside 1..={depth}")))
    } else {
        Ok(())
    }
}

/// `D^I v` componentwise.
fn iterated_vector(v: &VectorField, idx: &MultiIndex) -> Result<VectorField> {
    let grid = v.grid();
    let comps = v
        .components()
        .iter()
        .map(|c| {
            let f = ScalarField::from_vec_unchecked(grid, c.clone());
            iterated_partial(&f, idx).map(ScalarField::into_values)
        })
        .collect::<Result<Vec<_>>>()?;
    VectorField::from_components(grid, comps)
}

/// `Xi^n[grad w]` using the primal effective coefficients.
pub fn commutator_apply(h: &CorrectorHierarchy, n: usize, grad_w: &VectorField) -> Result<VectorField> {
    check_order(n, h.depth())?;
    let grid = h.grid();
    if grad_w.grid() != grid {
        return Err(Error::Shape("gradient and hierarchy grids differ".into()));
    }
    let d = grid.dim();
    let mut out = h.coefficients().apply(grad_w)?;
    let abar1 = h.abar(&MultiIndex::empty())?;
    subtract_constant_matrix(&mut out, &abar1, grad_w, d);
    for k in 2..=n {
        for prefix in MultiIndex::all(k - 1, d) {
            let m = h.abar(&prefix)?;
            let dv = iterated_vector(grad_w, &prefix)?;
            subtract_constant_matrix(&mut out, &m, &dv, d);
        }
    }
    Ok(out)
}

fn subtract_constant_matrix(out: &mut VectorField, m: &[f64], v: &VectorField, d: usize) {
    for r in 0..d {
        for c in 0..d {
            let w = m[r * d + c];
            if w != 0.0 {
                let src = v.component(c).to_vec();
                out.component_mut(r).iter_mut().zip(&src).for_each(|(o, s)| *o -= w * s);
            }
        }
    }
}

/// `e_j . Xi^n[grad w]` through the transposed representation
/// `a* e_j . grad w - sum_{k=1..n} (-1)^(k-1) abar^{*,k}_{j i_1..i_{k-2}} e_{i_{k-1}} . D_{i_1..i_{k-1}} grad w`.
pub fn commutator_apply_transposed(
    pair: &HierarchyPair,
    n: usize,
    j: usize,
    grad_w: &VectorField,
) -> Result<ScalarField> {
    check_order(n, pair.depth())?;
    let grid = pair.primal().grid();
    grid.check_axis(j)?;
    let d = grid.dim();
    let a = pair.primal().coefficients();
    let mut out = vec![0.0; grid.len()];
    for r in 0..d {
        let coef = a.entry(j, r);
        out.iter_mut()
            .zip(coef.iter().zip(grad_w.component(r)))
            .for_each(|(o, (c, g))| *o += c * g);
    }
    let dual = pair.dual();
    let column = &dual.entry(&MultiIndex::new(vec![j]))?.abar_column;
    for r in 0..d {
        out.iter_mut().zip(grad_w.component(r)).for_each(|(o, g)| *o -= column[r] * g);
    }
    for k in 2..=n {
        let sign = if k % 2 == 0 { -1.0 } else { 1.0 };
        for idx in MultiIndex::all(k - 1, d) {
            let column = &dual.entry(&idx.prepended(j))?.abar_column;
            let dv = iterated_vector(grad_w, &idx)?;
            for r in 0..d {
                let w = sign * column[r];
                out.iter_mut().zip(dv.component(r)).for_each(|(o, g)| *o -= w * g);
            }
        }
    }
    Ok(ScalarField::from_vec_unchecked(grid, out))
}

/// Constants entering one row `j` of the standard commutator.
#[derive(Debug, Clone, PartialEq)]
pub struct CommutatorCoefficients {
    pub order: usize,
    pub j: usize,
    /// Row `j` of `abar^1`.
    pub abar_row: Vec<f64>,
    /// For `k = 2..=n` and `|I| = k - 1`: `(I, sign_k * abar^{*,k}_{j I'} e_{i_{k-1}})`
    /// with `sign_k = -(-1)^(k-1)`, so the higher-order part is
    /// `sum (col . D^I grad phi_i)`.
    pub higher: Vec<(MultiIndex, Vec<f64>)>,
}

impl CommutatorCoefficients {
    pub fn from_pair(pair: &HierarchyPair, n: usize, j: usize) -> Result<Self> {
        check_order(n, pair.depth())?;
        let grid = pair.primal().grid();
        grid.check_axis(j)?;
        let d = grid.dim();
        let abar1 = pair.primal().abar(&MultiIndex::empty())?;
        let abar_row = abar1[j * d..(j + 1) * d].to_vec();
        let mut higher = Vec::new();
        for k in 2..=n {
            let sign = if k % 2 == 0 { 1.0 } else { -1.0 };
            for idx in MultiIndex::all(k - 1, d) {
                let column = &pair.dual().entry(&idx.prepended(j))?.abar_column;
                higher.push((idx, column.iter().map(|v| sign * v).collect()));
            }
        }
        Ok(CommutatorCoefficients { order: n, j, abar_row, higher })
    }
}

/// `Xi^{o,n}_ij` from the corrector gradient `grad phi_i` and frozen constants.
pub fn commutator_component(
    a: &MatrixField,
    grad_phi: &VectorField,
    i: usize,
    coeffs: &CommutatorCoefficients,
) -> Result<ScalarField> {
    let grid = a.grid();
    let d = grid.dim();
    let j = coeffs.j;
    let mut out = vec![0.0; grid.len()];
    for c in 0..d {
        let coef = a.entry(j, c);
        let m = coeffs.abar_row[c];
        let g = grad_phi.component(c);
        let unit = if c == i { 1.0 } else { 0.0 };
        out.iter_mut()
            .zip(coef.iter().zip(g))
            .for_each(|(o, (a, g))| *o += (a - m) * (g + unit));
    }
    for (idx, column) in &coeffs.higher {
        let dv = iterated_vector(grad_phi, idx)?;
        for r in 0..d {
            let w = column[r];
            out.iter_mut().zip(dv.component(r)).for_each(|(o, g)| *o += w * g);
        }
    }
    Ok(ScalarField::from_vec_unchecked(grid, out))
}

#[derive(Debug, Clone)]
pub struct CommutatorField {
    pub order: usize,
    grid: TorusGrid,
    /// Entry `(i, j)` at `i * d + j`.
    entries: Vec<ScalarField>,
}

impl CommutatorField {
    pub fn entry(&self, i: usize, j: usize) -> &ScalarField {
        &self.entries[i * self.grid.dim() + j]
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(ScalarField::is_finite)
    }
}

/// Single entry `Xi^{o,n}_ij`.
pub fn standard_commutator_entry(pair: &HierarchyPair, n: usize, i: usize, j: usize) -> Result<ScalarField> {
    let coeffs = CommutatorCoefficients::from_pair(pair, n, j)?;
    let grad = pair.primal().entry(&MultiIndex::new(vec![i]))?.grad_phi();
    commutator_component(pair.primal().coefficients(), &grad, i, &coeffs)
}

/// All entries `Xi^{o,n}_ij`.
pub fn standard_commutator(pair: &HierarchyPair, n: usize) -> Result<CommutatorField> {
    check_order(n, pair.depth())?;
    let grid = pair.primal().grid();
    let d = grid.dim();
    let coeffs: Vec<CommutatorCoefficients> =
        (0..d).map(|j| CommutatorCoefficients::from_pair(pair, n, j)).collect::<Result<_>>()?;
    let mut entries = Vec::with_capacity(d * d);
    for i in 0..d {
        let grad = pair.primal().entry(&MultiIndex::new(vec![i]))?.grad_phi();
        for c in &coeffs {
            entries.push(commutator_component(pair.primal().coefficients(), &grad, i, c)?);
        }
    }
    Ok(CommutatorField { order: n, grid, entries })
}

/// Relative size below which a primal/dual difference is round-off.
/// Both tensors are torus averages of coefficient-sized products, so the
/// reference magnitude includes the coefficients themselves.
pub const ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetryComponent {
    /// `(j, i_1, ..., i_n)`, 0-based.
    pub indices: Vec<usize>,
    /// Symmetrized `e_j . abar^n_{i_1..i_{n-1}} e_{i_n}`.
    pub primal: f64,
    /// `(-1)^(n+1)` times symmetrized `e_{i_n} . abar^{*,n}_{j i_1..i_{n-2}} e_{i_{n-1}}`.
    pub dual: f64,
    pub difference: f64,
    pub stderr: f64,
    /// Largest per-sample magnitude of either side or of the coefficients.
    pub scale: f64,
}

impl SymmetryComponent {
    /// `|difference| / stderr`. A difference at round-off level relative to
    /// the tensors counts as zero: when the relation holds sample by sample
    /// the standard error is round-off too and the ratio carries no meaning.
    pub fn z_score(&self) -> f64 {
        if self.difference.abs() <= ROUNDOFF * self.scale {
            0.0
        } else if self.stderr > 0.0 {
            self.difference.abs() / self.stderr
        } else if self.difference == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SymmetryReport {
    pub order: usize,
    pub samples: usize,
    pub components: Vec<SymmetryComponent>,
    /// Largest per-sample `|abar^{*,1} - (abar^1)^T|`.
    pub max_first_order_mismatch: f64,
}

impl SymmetryReport {
    pub fn max_z_score(&self) -> f64 {
        self.components.iter().map(SymmetryComponent::z_score).fold(0.0, f64::max)
    }

    pub fn max_abs_difference(&self) -> f64 {
        self.components.iter().map(|c| c.difference.abs()).fold(0.0, f64::max)
    }
}

/// Per-sample symmetrized primal and signed dual tensors, flattened over
/// `(j, i_1..i_n)` in linear order.
fn symmetrized_tensors(pair: &HierarchyPair, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = pair.primal().grid().dim();
    let primal_at = |j: usize, idx: &MultiIndex| -> Result<f64> {
        Ok(pair.primal().entry(idx)?.abar_column[j])
    };
    let dual_at = |j: usize, idx: &MultiIndex| -> Result<f64> {
        // e_{i_n} . abar^{*,n}_{j i_1..i_{n-2}} e_{i_{n-1}}
        let axes = idx.axes();
        let last = axes[n - 1];
        let key = MultiIndex::new(axes[..n - 1].to_vec()).prepended(j);
        Ok(pair.dual().entry(&key)?.abar_column[last])
    };
    let perms = permutations(n);
    let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
    let mut lhs = Vec::new();
    let mut rhs = Vec::new();
    for j in 0..d {
        for idx in MultiIndex::all(n, d) {
            let mut p = 0.0;
            let mut q = 0.0;
            for perm in &perms {
                let permuted = MultiIndex::new(perm.iter().map(|&k| idx.axes()[k]).collect());
                p += primal_at(j, &permuted)?;
                q += dual_at(j, &permuted)?;
            }
            lhs.push(p / perms.len() as f64);
            rhs.push(sign * q / perms.len() as f64);
        }
    }
    Ok((lhs, rhs))
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Monte Carlo check of the relation between symmetrized primal and dual
/// effective tensors at order `n`.
pub fn symmetry_check(
    spec: &EnsembleSpec,
    n: usize,
    samples: usize,
    settings: SolverSettings,
    exec: Execution,
) -> Result<SymmetryReport> {
    check_order(n, spec.grid.hierarchy_depth())?;
    if samples < 2 {
        return Err(Error::param("symmetry check needs at least 2 samples"));
    }
    let sampler = Sampler::new(*spec);
    let d = spec.grid.dim();
    let per_sample = exec.try_map(samples, |s| {
        let a = sampler.coefficients(s as u64);
        let pair = HierarchyPair::build(&a, sampler.spectral(), n, settings, Execution::Sequential)?;
        let abar = pair.primal().abar(&MultiIndex::empty())?;
        let dual = pair.dual().abar(&MultiIndex::empty())?;
        let mut mismatch = 0.0f64;
        for r in 0..d {
            for c in 0..d {
                mismatch = mismatch.max((dual[r * d + c] - abar[c * d + r]).abs());
            }
        }
        let (lhs, rhs) = symmetrized_tensors(&pair, n)?;
        Ok::<_, Error>((mismatch, lhs, rhs, a.max_abs()))
    })?;
    let max_first_order_mismatch = per_sample.iter().map(|s| s.0).fold(0.0, f64::max);
    let count = per_sample[0].1.len();
    let coefficient_scale = per_sample.iter().map(|s| s.3).fold(0.0, f64::max);
    let components = (0..count)
        .map(|k| {
            let lhs: Vec<f64> = per_sample.iter().map(|s| s.1[k]).collect();
            let rhs: Vec<f64> = per_sample.iter().map(|s| s.2[k]).collect();
            let diff: Vec<f64> = lhs.iter().zip(&rhs).map(|(a, b)| a - b).collect();
            let j = k / d.pow(n as u32);
            let idx = MultiIndex::from_linear(n, d, k % d.pow(n as u32));
            SymmetryComponent {
                indices: std::iter::once(j).chain(idx.axes().iter().copied()).collect(),
                primal: mean(&lhs),
                dual: mean(&rhs),
                difference: mean(&diff),
                stderr: stderr_of_mean(&diff),
                scale: lhs.iter().chain(&rhs).fold(coefficient_scale, |m, v| m.max(v.abs())),
            }
        })
        .collect();
    Ok(SymmetryReport { order: n, samples, components, max_first_order_mismatch })
}

/// Torus average of the first-order commutator (zero up to round-off).
pub fn first_order_mean(pair: &HierarchyPair, i: usize, j: usize) -> Result<f64> {
    Ok(standard_commutator_entry(pair, 1, i, j)?.mean())
}

/// `grad phi_i + e_i` for the primal hierarchy.
pub fn corrected_gradient(h: &CorrectorHierarchy, i: usize) -> Result<VectorField> {
    let mut g = gradient(&h.entry(&MultiIndex::new(vec![i]))?.phi);
    g.component_mut(i).iter_mut().for_each(|v| *v += 1.0);
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{CoefficientMap, MapKind, SpectralCovariance};
    use crate::grid::Spectral;

    fn pair(dim: usize, side: usize, kind: MapKind) -> HierarchyPair {
        let spec = EnsembleSpec {
            covariance: SpectralCovariance::stable(1.0, 2.0, 1.0).unwrap(),
            map: CoefficientMap::new(0.2, kind, 1.5, 0.8).unwrap(),
            grid: TorusGrid::new(dim, side).unwrap(),
            seed: 21,
        };
        let s = Sampler::new(spec);
        let a = s.coefficients(0);
        HierarchyPair::build(&a, s.spectral(), s.spectral().grid().hierarchy_depth(), SolverSettings::default(), Execution::Sequential)
            .unwrap()
    }

    #[test]
    fn constant_coefficients_give_zero_commutator() {
        let grid = TorusGrid::new(3, 8).unwrap();
        let a = MatrixField::constant(grid, &[0.5, 0.1, 0.0, -0.1, 0.5, 0.0, 0.0, 0.0, 0.5]).unwrap();
        let spectral = Spectral::new(grid);
        let p = HierarchyPair::build(&a, &spectral, 2, SolverSettings::default(), Execution::Sequential).unwrap();
        let xi = standard_commutator(&p, 2).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(xi.entry(i, j).max_abs() <= 1e-12);
            }
        }
        let w = gradient(&ScalarField::from_fn(grid, |c| (c[0] * c[1]) as f64));
        assert!(commutator_apply(p.primal(), 2, &w).unwrap().max_abs() <= 1e-12);
    }

    #[test]
    fn first_order_matches_direct_arithmetic_and_transposed_form() {
        let p = pair(2, 16, MapKind::SkewLogistic);
        let h = p.primal();
        let abar = h.abar(&MultiIndex::empty()).unwrap();
        for i in 0..2 {
            let u = corrected_gradient(h, i).unwrap();
            let direct = commutator_apply(h, 1, &u).unwrap();
            let au = h.coefficients().apply(&u).unwrap();
            for j in 0..2 {
                let std = standard_commutator_entry(&p, 1, i, j).unwrap();
                let trans = commutator_apply_transposed(&p, 1, j, &u).unwrap();
                for idx in 0..16 * 16 {
                    let oracle = au.component(j)[idx]
                        - abar[j * 2] * u.component(0)[idx]
                        - abar[j * 2 + 1] * u.component(1)[idx];
                    assert!((direct.component(j)[idx] - oracle).abs() < 1e-12);
                    assert!((std.values()[idx] - oracle).abs() < 1e-12);
                    assert!((trans.values()[idx] - oracle).abs() < 1e-10);
                }
                assert!(std.mean().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn second_order_matches_termwise_oracle() {
        let p = pair(3, 8, MapKind::ScalarLogistic);
        let h = p.primal();
        let u = corrected_gradient(h, 0).unwrap();
        let got = commutator_apply(h, 2, &u).unwrap();
        let first = commutator_apply(h, 1, &u).unwrap();
        for r in 0..3 {
            let mut expect = first.component(r).to_vec();
            for i1 in 0..3 {
                let m = h.abar(&MultiIndex::new(vec![i1])).unwrap();
                for c in 0..3 {
                    let f = ScalarField::from_vec_unchecked(h.grid(), u.component(c).to_vec());
                    let dv = crate::grid::forward_diff(&f, i1).unwrap();
                    for (e, v) in expect.iter_mut().zip(dv.values()) {
                        *e -= m[r * 3 + c] * v;
                    }
                }
            }
            for (x, y) in got.component(r).iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn commutator_apply_is_linear() {
        let p = pair(2, 16, MapKind::ScalarLogistic);
        let grid = p.primal().grid();
        let u = gradient(&ScalarField::from_fn(grid, |c| ((c[0] * 3 + c[1]) % 7) as f64));
        let v = gradient(&ScalarField::from_fn(grid, |c| ((c[0] + 5 * c[1]) % 5) as f64));
        let mut sum = u.clone();
        sum.add_assign(&v);
        sum.scale(2.0);
        let lhs = commutator_apply(p.primal(), 1, &sum).unwrap();
        let mut rhs = commutator_apply(p.primal(), 1, &u).unwrap();
        rhs.add_assign(&commutator_apply(p.primal(), 1, &v).unwrap());
        rhs.scale(2.0);
        for r in 0..2 {
            for (x, y) in lhs.component(r).iter().zip(rhs.component(r)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn order_is_validated() {
        let p = pair(2, 8, MapKind::ScalarLogistic);
        assert!(standard_commutator(&p, 2).is_err());
        assert!(standard_commutator(&p, 0).is_err());
    }

    #[test]
    fn roundoff_differences_have_zero_z_score() {
        let c = |difference: f64, stderr: f64| SymmetryComponent {
            indices: vec![0, 0, 0],
            primal: 0.3,
            dual: 0.3 - difference,
            difference,
            stderr,
            scale: 0.3,
        };
        assert_eq!(c(1e-16, 1e-18).z_score(), 0.0);
        assert!(c(1e-12, 1e-13).z_score() > 9.0);
        assert_eq!(c(0.0, 0.0).z_score(), 0.0);
        assert!((c(1e-3, 2e-4).z_score() - 5.0).abs() < 1e-12);
        assert_eq!(c(1e-3, 0.0).z_score(), f64::INFINITY);
    }

    #[test]
    fn permutations_cover_symmetric_group() {
        assert_eq!(permutations(1), vec![vec![0]]);
        let mut p3 = permutations(3);
        p3.sort();
        assert_eq!(p3.len(), 6);
        p3.dedup();
        assert_eq!(p3.len(), 6);
    }
}
