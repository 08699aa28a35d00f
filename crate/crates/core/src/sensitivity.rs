//! Test functions, observables `F = sum g Xi^{o,n}_ij`, their functional
//! derivative with respect to the coefficient field, and the statistics built
//! on top of it.
//!
//! The derivative is assembled as a rank-one field
//! `dF/da(x) = (local(x) + grad h(x)) (grad phi_i(x) + e_i)^T`, so that
//! `dF/da : delta_a = sum_x (local + grad h) . delta_a (grad phi_i + e_i)`.
//! With `psi_I = D^-_I g` the lattice derivatives of the sampled test function
//! and starred quantities taken from the dual hierarchy,
//!
//! ```text
//! Pi    = sum_{k=0..n-1} psi_{i_1..i_k} phi*_{j i_1..i_k}
//! S     = sum_{k=0..n-1} psi_{i_1..i_k} sigma*_{j i_1..i_k}
//! local = g e_j + grad Pi
//! f     = g (a - abar^1)^T e_j - sum_{k=2..n} psi_{i_1..i_{k-1}} abar*^k_{j i_1..i_{k-2}} e_{i_{k-1}}
//!         + a* grad Pi - div S
//! -div(a* grad h) = div f.
//! ```
//!
//! Summation by parts on the lattice makes this an exact identity for the
//! Gateaux derivative taken with the effective coefficients held fixed. The
//! flux `f` reduces to `(a* phi*_{j..} - sigma*_{j..}) grad D^{n-1} g` up to
//! lattice product-rule terms, and both `local` and `f` vanish outside the ball
//! of radius `R + n + 1` around the centre of `g`.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::commutator::{commutator_component, CommutatorCoefficients};
use crate::correctors::{HierarchyPair, SkewField};
use crate::elliptic::{DivFormSolver, SolveReport, SolverSettings};
use crate::ensemble::{EnsembleSpec, Sampler};
use crate::error::{Error, Result};
use crate::grid::{
    adjoint_div, gradient, iterated_backward, MatrixField, MultiIndex, ScalarField, Spectral,
    TorusGrid, VectorField,
};
use crate::par::Execution;
use crate::stats::{fit_power_law, lp_moment, mean, stderr_of_mean, Point, PowerFit};

/// Highest derivative order available in closed form.
pub const MAX_DERIVATIVE_ORDER: usize = 3;

/// `int_{|y|<1} exp(-1/(1-|y|^2)) dy` by Simpson's rule in the radius.
fn bump_mass(dim: usize) -> f64 {
    let n = 200_000;
    let h = 1.0 / n as f64;
    let f = |r: f64| {
        if r >= 1.0 {
            0.0
        } else {
            r.powi(dim as i32 - 1) * (-1.0 / (1.0 - r * r)).exp()
        }
    };
    let mut sum = f(0.0) + f(1.0);
    for k in 1..n {
        sum += if k % 2 == 1 { 4.0 } else { 2.0 } * f(k as f64 * h);
    }
    let radial = sum * h / 3.0;
    let sphere = match dim {
        2 => 2.0 * std::f64::consts::PI,
        _ => 4.0 * std::f64::consts::PI,
    };
    sphere * radial
}

/// `g(x) = R^-d eta((x - center) / R)` with the unit-mass bump
/// `eta(y) = C exp(-1 / (1 - |y|^2))` on the unit ball.
#[derive(Debug, Clone, PartialEq)]
pub struct TestFunction {
    grid: TorusGrid,
    radius: f64,
    center: Vec<usize>,
    scale: f64,
}

impl TestFunction {
    /// The support must fit into the torus with a margin of one radius,
    /// i.e. `3 R <= M`.
    pub fn new(grid: TorusGrid, radius: f64, center: &[usize]) -> Result<Self> {
        if !(radius > 0.0 && radius.is_finite()) {
            return Err(Error::param(format!("test function radius must be positive, got {radius}")));
        }
        if 3.0 * radius > grid.side() as f64 {
            return Err(Error::param(format!(
                "test function of radius {radius} does not fit a torus of side {} with margin",
                grid.side()
            )));
        }
        if center.len() != grid.dim() || center.iter().any(|&c| c >= grid.side()) {
            return Err(Error::param("test function centre is not a lattice point of the grid"));
        }
        Ok(TestFunction { grid, radius, center: center.to_vec(), scale: 1.0 / bump_mass(grid.dim()) })
    }

    /// Centred at the middle of the torus.
    pub fn centered(grid: TorusGrid, radius: f64) -> Result<Self> {
        Self::new(grid, radius, &vec![grid.side() / 2; grid.dim()])
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn center(&self) -> &[usize] {
        &self.center
    }

    /// Same profile moved by `shift` lattice steps (periodically).
    pub fn shifted(&self, shift: &[i64]) -> TestFunction {
        let m = self.grid.side() as i64;
        let center = self
            .center
            .iter()
            .zip(shift)
            .map(|(&c, &s)| (c as i64 + s).rem_euclid(m) as usize)
            .collect();
        TestFunction { center, ..self.clone() }
    }

    /// Distance of a cell to the centre (minimal image).
    pub fn distance(&self, idx: usize) -> f64 {
        let y = self.grid.displacement(idx, &self.center);
        y[..self.grid.dim()].iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Closed-form `D^I eta` at `y` (|I| <= 3), unnormalized.
    fn profile_derivative(y: &[f64], axes: &[usize]) -> f64 {
        let s: f64 = y.iter().map(|v| v * v).sum();
        if s >= 1.0 {
            return 0.0;
        }
        let u = 1.0 - s;
        let e = (-1.0 / u).exp();
        if e == 0.0 {
            return 0.0;
        }
        let p1 = -1.0 / (u * u);
        let p2 = -2.0 / (u * u * u);
        let p3 = -6.0 / (u * u * u * u);
        let e1 = p1 * e;
        let e2 = (p2 + p1 * p1) * e;
        let e3 = (p3 + 3.0 * p1 * p2 + p1 * p1 * p1) * e;
        let delta = |a: usize, b: usize| if a == b { 1.0 } else { 0.0 };
        match *axes {
            [] => e,
            [a] => 2.0 * e1 * y[a],
            [a, b] => 4.0 * e2 * y[a] * y[b] + 2.0 * e1 * delta(a, b),
            [a, b, c] => {
                8.0 * e3 * y[a] * y[b] * y[c]
                    + 4.0 * e2 * (delta(a, b) * y[c] + delta(a, c) * y[b] + delta(b, c) * y[a])
            }
            _ => unreachable!("order checked by caller"),
        }
    }

    /// Analytic `D^I g` sampled on the lattice.
    pub fn derivative(&self, idx: &MultiIndex) -> Result<ScalarField> {
        let d = self.grid.dim();
        idx.check(d)?;
        if idx.order() > MAX_DERIVATIVE_ORDER {
            return Err(Error::param(format!(
                "derivatives of order {} are not available (max {MAX_DERIVATIVE_ORDER})",
                idx.order()
            )));
        }
        let r = self.radius;
        let factor = self.scale * r.powi(-(d as i32) - idx.order() as i32);
        let reach = r.ceil() as i64;
        let mut out = ScalarField::zeros(self.grid);
        let values = out.values_mut();
        // Only visit the bounding box of the support.
        let mut offset = vec![-reach; d];
        loop {
            let y: Vec<f64> = offset.iter().map(|&o| o as f64 / r).collect();
            let v = Self::profile_derivative(&y, idx.axes());
            if v != 0.0 {
                let coords: Vec<i64> =
                    self.center.iter().zip(&offset).map(|(&c, &o)| c as i64 + o).collect();
                values[self.grid.index(&coords)] = factor * v;
            }
            let mut axis = d;
            loop {
                if axis == 0 {
                    return Ok(out);
                }
                axis -= 1;
                if offset[axis] < reach {
                    offset[axis] += 1;
                    break;
                }
                offset[axis] = -reach;
            }
        }
    }

    pub fn values(&self) -> ScalarField {
        self.derivative(&MultiIndex::empty()).expect("order zero")
    }
}

/// Analytic derivative `D^I g` on the lattice.
pub fn bump_eval(tf: &TestFunction, order: &MultiIndex) -> Result<ScalarField> {
    tf.derivative(order)
}

/// Lattice sum `sum_x g(x) field(x)`.
pub fn observable(g: &TestFunction, field: &ScalarField) -> Result<f64> {
    if g.grid() != field.grid() {
        return Err(Error::Shape("test function and field live on different grids".into()));
    }
    Ok(g.values().dot(field))
}

/// Auxiliary solution and the pieces of its right-hand side.
#[derive(Debug, Clone)]
pub struct AuxiliarySolution {
    pub h: ScalarField,
    pub grad_h: VectorField,
    /// Flux `f` with `-div(a* grad h) = div f`.
    pub flux: VectorField,
    /// `g e_j + grad Pi`.
    pub local: VectorField,
    pub report: SolveReport,
    /// Independent re-check `|A h - div f| / |div f|`.
    pub verified_residual: f64,
}

/// Backward lattice derivatives `D^-_I g` for all `|I| <= max_order`, keyed
/// by order then linear index.
fn lattice_derivatives(g: &ScalarField, max_order: usize) -> Result<Vec<Vec<ScalarField>>> {
    let d = g.grid().dim();
    (0..=max_order)
        .map(|k| MultiIndex::all(k, d).map(|idx| iterated_backward(g, &idx)).collect())
        .collect()
}

/// Solves for `h_j` and assembles the local part of the derivative.
pub fn h_solve(
    pair: &HierarchyPair,
    spectral: &Spectral,
    g: &TestFunction,
    j: usize,
    n: usize,
    settings: SolverSettings,
) -> Result<AuxiliarySolution> {
    let grid = pair.primal().grid();
    if g.grid() != grid {
        return Err(Error::Shape("test function grid differs from hierarchy grid".into()));
    }
    let coeffs = CommutatorCoefficients::from_pair(pair, n, j)?;
    let d = grid.dim();
    let a = pair.primal().coefficients();
    let dual = pair.dual();
    let a_star = dual.coefficients();
    let gv = g.values();
    let psi = lattice_derivatives(&gv, n - 1)?;

    // V = g (a - abar^1)^T e_j - sum psi_I abar*-columns
    let mut flux = VectorField::zeros(grid);
    for r in 0..d {
        let coef = a.entry(j, r);
        let m = coeffs.abar_row[r];
        flux.component_mut(r)
            .iter_mut()
            .zip(coef.iter().zip(gv.values()))
            .for_each(|(f, (a, g))| *f = g * (a - m));
    }
    for (idx, column) in &coeffs.higher {
        // Stored columns carry -(-1)^(k-1); summation by parts contributes
        // (-1)^(k-1), leaving a minus sign.
        let sign = if idx.order() % 2 == 0 { 1.0 } else { -1.0 };
        let p = &psi[idx.order()][idx.linear(d)];
        for r in 0..d {
            let w = sign * column[r];
            flux.component_mut(r).iter_mut().zip(p.values()).for_each(|(f, p)| *f += w * p);
        }
    }

    let mut pi = vec![0.0; grid.len()];
    let mut skew = SkewField::zeros(grid);
    for k in 0..n {
        for idx in MultiIndex::all(k, d) {
            let e = dual.entry(&idx.prepended(j))?;
            let p = &psi[k][idx.linear(d)];
            pi.iter_mut().zip(p.values().iter().zip(e.phi.values())).for_each(|(o, (p, f))| *o += p * f);
            skew.add_weighted(&e.sigma, p.values());
        }
    }
    let pi = ScalarField::from_vec_unchecked(grid, pi);
    let grad_pi = gradient(&pi);
    flux.add_assign(&a_star.apply(&grad_pi)?);
    let div_s = skew.div();
    for r in 0..d {
        let src = div_s.component(r).to_vec();
        flux.component_mut(r).iter_mut().zip(&src).for_each(|(f, s)| *f -= s);
    }

    let mut local = grad_pi;
    local.component_mut(j).iter_mut().zip(gv.values()).for_each(|(l, g)| *l += g);

    let solver = DivFormSolver::new(a_star, spectral, settings)?;
    let rhs = adjoint_div(&flux);
    let (h, report) = solver.solve(&rhs)?;
    if !report.converged {
        return Err(Error::NotConverged {
            context: format!("auxiliary solution for j = {}", j + 1),
            iterations: report.iterations,
            residual: report.residual,
        });
    }
    let ah = crate::elliptic::apply_operator(a_star, &h)?;
    let rn = rhs.norm();
    let verified_residual = if rn > 0.0 {
        ah.values().iter().zip(rhs.values()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt() / rn
    } else {
        0.0
    };
    let grad_h = gradient(&h);
    Ok(AuxiliarySolution { h, grad_h, flux, local, report, verified_residual })
}

/// Rank-one functional derivative `(local + grad h) (grad phi_i + e_i)^T`.
#[derive(Debug, Clone)]
pub struct FunctionalDerivative {
    pub i: usize,
    pub j: usize,
    pub order: usize,
    /// `grad phi_i + e_i`.
    pub right: VectorField,
    pub auxiliary: AuxiliarySolution,
}

impl FunctionalDerivative {
    pub fn local(&self) -> &VectorField {
        &self.auxiliary.local
    }

    pub fn grad_h(&self) -> &VectorField {
        &self.auxiliary.grad_h
    }

    /// `sum_x left . delta_a right` for a chosen left factor.
    fn contract_with(&self, left: &VectorField, delta_a: &MatrixField) -> Result<f64> {
        let m = delta_a.apply(&self.right)?;
        Ok(left.dot(&m))
    }

    /// `sum_x dF/da(x) : delta_a(x)`.
    pub fn contract(&self, delta_a: &MatrixField) -> Result<f64> {
        Ok(self.contract_local(delta_a)? + self.contract_h(delta_a)?)
    }

    pub fn contract_local(&self, delta_a: &MatrixField) -> Result<f64> {
        self.contract_with(&self.auxiliary.local, delta_a)
    }

    pub fn contract_h(&self, delta_a: &MatrixField) -> Result<f64> {
        self.contract_with(&self.auxiliary.grad_h, delta_a)
    }

    /// Derivative matrix at one cell, row-major `d x d`.
    pub fn at(&self, idx: usize) -> Vec<f64> {
        let d = self.right.grid().dim();
        let mut out = vec![0.0; d * d];
        for r in 0..d {
            let left = self.auxiliary.local.component(r)[idx] + self.auxiliary.grad_h.component(r)[idx];
            for c in 0..d {
                out[r * d + c] = left * self.right.component(c)[idx];
            }
        }
        out
    }

    /// Dense field of the derivative.
    pub fn to_matrix(&self) -> MatrixField {
        let grid = self.right.grid();
        let d = grid.dim();
        let mut m = MatrixField::zeros(grid);
        for r in 0..d {
            for c in 0..d {
                let u = self.right.component(c);
                let l = self.auxiliary.local.component(r);
                let h = self.auxiliary.grad_h.component(r);
                m.entry_mut(r, c)
                    .iter_mut()
                    .enumerate()
                    .for_each(|(k, e)| *e = (l[k] + h[k]) * u[k]);
            }
        }
        m
    }

    /// Pointwise squared Frobenius norm.
    pub fn norm_sq(&self) -> Vec<f64> {
        let grid = self.right.grid();
        let d = grid.dim();
        (0..grid.len())
            .map(|k| {
                let l: f64 = (0..d)
                    .map(|r| {
                        let v = self.auxiliary.local.component(r)[k] + self.auxiliary.grad_h.component(r)[k];
                        v * v
                    })
                    .sum();
                let u: f64 = (0..d).map(|c| self.right.component(c)[k].powi(2)).sum();
                l * u
            })
            .collect()
    }
}

/// Functional derivative of `F^{o,n}_ij[g]`.
pub fn representation_derivative(
    pair: &HierarchyPair,
    spectral: &Spectral,
    g: &TestFunction,
    i: usize,
    j: usize,
    n: usize,
    settings: SolverSettings,
) -> Result<FunctionalDerivative> {
    let grid = pair.primal().grid();
    grid.check_axis(i)?;
    let mut right = gradient(&pair.primal().entry(&MultiIndex::new(vec![i]))?.phi);
    right.component_mut(i).iter_mut().for_each(|v| *v += 1.0);
    let auxiliary = h_solve(pair, spectral, g, j, n, settings)?;
    Ok(FunctionalDerivative { i, j, order: n, right, auxiliary })
}

/// `F^{o,n}_ij[g]` for a hierarchy pair.
pub fn commutator_observable(pair: &HierarchyPair, g: &TestFunction, i: usize, j: usize, n: usize) -> Result<f64> {
    let field = crate::commutator::standard_commutator_entry(pair, n, i, j)?;
    observable(g, &field)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GateauxRow {
    pub t: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateauxTable {
    pub rows: Vec<GateauxRow>,
    /// Contribution of the auxiliary solution to the right-hand side.
    pub rhs_h_part: f64,
}

impl GateauxTable {
    /// `err(t_{k+1}) / err(t_k)` for consecutive rows.
    pub fn error_ratios(&self) -> Vec<f64> {
        self.rows
            .windows(2)
            .map(|w| (w[1].lhs - w[1].rhs).abs() / (w[0].lhs - w[0].rhs).abs())
            .collect()
    }
}

/// Minimum over cells of the smallest eigenvalue of the symmetric part.
pub fn min_symmetric_eigenvalue(a: &MatrixField) -> f64 {
    let d = a.grid().dim();
    (0..a.grid().len())
        .map(|k| {
            let m = DMatrix::from_row_slice(d, d, &a.at(k));
            let sym = (&m + m.transpose()) * 0.5;
            sym.symmetric_eigenvalues().min()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Compares difference quotients of `F^{o,n}_ij` along `delta_a` with the
/// assembled derivative. The effective coefficients are held at their values
/// for `a`; only the first-order corrector is recomputed at `a + t delta_a`.
#[allow(clippy::too_many_arguments)]
pub fn gateaux_check(
    a: &MatrixField,
    spectral: &Spectral,
    g: &TestFunction,
    i: usize,
    j: usize,
    n: usize,
    delta_a: &MatrixField,
    steps: &[f64],
    settings: SolverSettings,
) -> Result<GateauxTable> {
    if delta_a.grid() != a.grid() {
        return Err(Error::Shape("perturbation grid differs from coefficient grid".into()));
    }
    for &t in steps {
        if !(t > 0.0 && t.is_finite()) {
            return Err(Error::param(format!("Gateaux steps must be positive, got {t}")));
        }
        let lam = min_symmetric_eigenvalue(&a.add_scaled(t, delta_a)?);
        if !(lam > 0.0) {
            return Err(Error::param(format!(
                "a + t delta_a loses ellipticity at t = {t} (min eigenvalue {lam:.3e})"
            )));
        }
    }
    let pair = HierarchyPair::build(a, spectral, n, settings, Execution::Sequential)?;
    let coeffs = CommutatorCoefficients::from_pair(&pair, n, j)?;
    let deriv = representation_derivative(&pair, spectral, g, i, j, n, settings)?;
    let rhs = deriv.contract(delta_a)?;
    let rhs_h_part = deriv.contract_h(delta_a)?;
    let gv = g.values();
    let base_grad = gradient(&pair.primal().entry(&MultiIndex::new(vec![i]))?.phi);
    let f0 = gv.dot(&commutator_component(a, &base_grad, i, &coeffs)?);
    let rows = steps
        .iter()
        .map(|&t| {
            let at = a.add_scaled(t, delta_a)?;
            let solver = DivFormSolver::new(&at, spectral, settings)?;
            let (phi, report) = solver.solve_flux(&at.column(i))?;
            if !report.converged {
                return Err(Error::NotConverged {
                    context: format!("perturbed corrector at t = {t}"),
                    iterations: report.iterations,
                    residual: report.residual,
                });
            }
            let ft = gv.dot(&commutator_component(&at, &gradient(&phi), i, &coeffs)?);
            let lhs = (ft - f0) / t;
            let diff = (lhs - rhs).abs();
            let rel_error = if rhs != 0.0 { diff / rhs.abs() } else { diff };
            Ok(GateauxRow { t, lhs, rhs, rel_error })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GateauxTable { rows, rhs_h_part })
}

/// Random symmetric perturbation with entries uniform in `[-amplitude,
/// amplitude]` on the cells within max-norm distance `half_width` of
/// `center`, zero elsewhere.
pub fn box_perturbation(grid: TorusGrid, center: &[usize], half_width: usize, amplitude: f64, seed: u64) -> MatrixField {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let d = grid.dim();
    let mut out = MatrixField::zeros(grid);
    for k in 0..grid.len() {
        let y = grid.displacement(k, center);
        if y[..d].iter().any(|v| v.abs() > half_width as f64) {
            continue;
        }
        for r in 0..d {
            for c in r..d {
                let v = amplitude * rng.random_range(-1.0..=1.0);
                out.entry_mut(r, c)[k] = v;
                out.entry_mut(c, r)[k] = v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadialBin {
    pub r_lo: f64,
    pub r_hi: f64,
    /// Mean distance of the cells in the bin.
    pub r_mean: f64,
    pub cells: usize,
    /// `<|grad h|^4>^(1/4)` averaged over the bin.
    pub value: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RadiusDecay {
    pub radius: f64,
    pub bins: Vec<RadialBin>,
    /// Log-log fit of the bins over `[2R, M/4]`.
    pub radial_fit: Option<PowerFit>,
    /// `(sum_x <|grad h|^4>^(1/2))^(1/2)`.
    pub total: f64,
    pub total_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradHDecay {
    pub j: usize,
    pub order: usize,
    pub samples: usize,
    pub radii: Vec<RadiusDecay>,
    /// Fit of `total` against `R`.
    pub total_fit: Option<PowerFit>,
}

fn radial_edges(lo: f64, hi: f64) -> Vec<f64> {
    let per_octave = 4.0;
    let count = ((hi / lo).log2() * per_octave).ceil().max(1.0) as usize;
    (0..=count).map(|k| lo * (hi / lo).powf(k as f64 / count as f64)).collect()
}

/// Monte Carlo decay of `<|grad h_j(x)|^4>^(1/4)` in `|x - center|`, for
/// test functions of each radius centred on the torus.
pub fn grad_h_decay(
    spec: &EnsembleSpec,
    radii: &[f64],
    j: usize,
    n: usize,
    samples: usize,
    settings: SolverSettings,
    exec: Execution,
) -> Result<GradHDecay> {
    let grid = spec.grid;
    grid.check_axis(j)?;
    let batches = crate::stats::DEFAULT_BATCHES;
    if samples < 2 * batches {
        return Err(Error::param(format!("decay profile needs at least {} samples", 2 * batches)));
    }
    let max_r = radii.iter().cloned().fold(0.0, f64::max);
    if 8.0 * max_r > grid.side() as f64 {
        return Err(Error::param("torus side must be at least 8 times the largest radius"));
    }
    let tests: Vec<TestFunction> =
        radii.iter().map(|&r| TestFunction::centered(grid, r)).collect::<Result<_>>()?;
    let dist: Vec<f64> = (0..grid.len()).map(|k| tests[0].distance(k)).collect();
    let edges: Vec<Vec<f64>> =
        radii.iter().map(|&r| radial_edges(2.0 * r, grid.side() as f64 / 4.0)).collect();
    let bin_of = |ri: usize, k: usize| -> Option<usize> {
        let e = &edges[ri];
        let x = dist[k];
        if x < e[0] || x > e[e.len() - 1] {
            return None;
        }
        Some(e.windows(2).position(|w| x >= w[0] && x <= w[1]).unwrap_or(e.len() - 2))
    };
    let sampler = Sampler::new(*spec);
    let n_cells = grid.len();
    // Per radius: per-sample bin averages of |grad h|^4, per-batch cell sums.
    let mut bin_samples: Vec<Vec<Vec<f64>>> = edges.iter().map(|e| vec![Vec::new(); e.len() - 1]).collect();
    let mut batch_cells: Vec<Vec<Vec<f64>>> = radii.iter().map(|_| vec![vec![0.0; n_cells]; batches]).collect();
    let chunk = 8;
    let mut start = 0;
    while start < samples {
        let end = (start + chunk).min(samples);
        let results = exec.try_map(end - start, |off| {
            let s = start + off;
            let a = sampler.coefficients(s as u64);
            let pair = HierarchyPair::build(&a, sampler.spectral(), n, settings, Execution::Sequential)?;
            tests
                .iter()
                .map(|g| {
                    let aux = h_solve(&pair, sampler.spectral(), g, j, n, settings)?;
                    let gh = &aux.grad_h;
                    Ok((0..n_cells).map(|k| gh.norm_at(k).powi(4)).collect::<Vec<f64>>())
                })
                .collect::<Result<Vec<_>>>()
        })?;
        for (off, per_radius) in results.into_iter().enumerate() {
            let s = start + off;
            let batch = s * batches / samples;
            for (ri, q) in per_radius.iter().enumerate() {
                let nb = edges[ri].len() - 1;
                let mut sums = vec![0.0; nb];
                let mut counts = vec![0usize; nb];
                for (k, &v) in q.iter().enumerate() {
                    if let Some(b) = bin_of(ri, k) {
                        sums[b] += v;
                        counts[b] += 1;
                    }
                }
                for b in 0..nb {
                    if counts[b] > 0 {
                        bin_samples[ri][b].push(sums[b] / counts[b] as f64);
                    }
                }
                batch_cells[ri][batch].iter_mut().zip(q).for_each(|(acc, v)| *acc += v);
            }
        }
        start = end;
    }
    let batch_size = |b: usize| ((b + 1) * samples / batches - b * samples / batches) as f64;
    let mut out = Vec::new();
    for (ri, &radius) in radii.iter().enumerate() {
        let e = &edges[ri];
        let mut bins = Vec::new();
        for b in 0..e.len() - 1 {
            let cells: Vec<usize> = (0..n_cells).filter(|&k| bin_of(ri, k) == Some(b)).collect();
            if cells.is_empty() || bin_samples[ri][b].is_empty() {
                continue;
            }
            let (value, stderr) = lp_moment(&bin_samples[ri][b], 4.0);
            let r_mean = cells.iter().map(|&k| dist[k]).sum::<f64>() / cells.len() as f64;
            bins.push(RadialBin { r_lo: e[b], r_hi: e[b + 1], r_mean, cells: cells.len(), value, stderr });
        }
        let points: Vec<Point> = bins.iter().map(|b| Point::new(b.r_mean, b.value, b.stderr)).collect();
        let radial_fit = fit_power_law(&points).ok();
        let total_of = |cell_sum: &dyn Fn(usize) -> f64| -> f64 {
            (0..n_cells).map(|k| cell_sum(k).max(0.0).sqrt()).sum::<f64>().sqrt()
        };
        let pooled: Vec<f64> = (0..n_cells)
            .map(|k| batch_cells[ri].iter().map(|bc| bc[k]).sum::<f64>() / samples as f64)
            .collect();
        let total = total_of(&|k| pooled[k]);
        let per_batch: Vec<f64> = (0..batches)
            .map(|b| total_of(&|k| batch_cells[ri][b][k] / batch_size(b)))
            .collect();
        let total_stderr = stderr_of_mean(&per_batch);
        out.push(RadiusDecay { radius, bins, radial_fit, total, total_stderr });
    }
    let total_fit = if out.len() >= 3 {
        fit_power_law(&out.iter().map(|r| Point::new(r.radius, r.total, r.total_stderr)).collect::<Vec<_>>()).ok()
    } else {
        None
    };
    let _ = mean;
    Ok(GradHDecay { j, order: n, samples, radii: out, total_fit })
}

/// `sum_x p(x) sum_y |c(x - y)| q(y)` by FFT convolution.
pub fn cov_bound_rhs(spectral: &Spectral, p: &[f64], q: &[f64], kernel: &ScalarField) -> Result<f64> {
    let n = spectral.grid().len();
    if p.len() != n || q.len() != n || kernel.grid() != spectral.grid() {
        return Err(Error::Shape("profiles and kernel must live on the spectral grid".into()));
    }
    if p.iter().all(|v| *v == 0.0) || q.iter().all(|v| *v == 0.0) {
        return Ok(0.0);
    }
    let abs_c: Vec<f64> = kernel.values().iter().map(|v| v.abs()).collect();
    let conv = spectral.convolve(&abs_c, q);
    Ok(p.iter().zip(&conv).map(|(a, b)| a * b).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ensemble::{CoefficientMap, MapKind, SpectralCovariance};

    fn sample_pair(dim: usize, side: usize, kind: MapKind) -> (MatrixField, Spectral, HierarchyPair) {
        let spec = EnsembleSpec {
            covariance: SpectralCovariance::stable(1.0, 2.0, 1.0).unwrap(),
            map: CoefficientMap::new(0.2, kind, 1.5, 0.8).unwrap(),
            grid: TorusGrid::new(dim, side).unwrap(),
            seed: 33,
        };
        let s = Sampler::new(spec);
        let a = s.coefficients(0);
        let n = spec.grid.hierarchy_depth();
        let pair = HierarchyPair::build(&a, s.spectral(), n, SolverSettings::default(), Execution::Sequential).unwrap();
        (a, s.spectral().clone(), pair)
    }

    #[test]
    fn bump_has_unit_mass_and_compact_support() {
        let grid = TorusGrid::new(2, 64).unwrap();
        let g8 = TestFunction::centered(grid, 8.0).unwrap();
        let g16 = TestFunction::centered(grid, 16.0).unwrap();
        let m8: f64 = g8.values().values().iter().sum();
        let m16: f64 = g16.values().values().iter().sum();
        assert!((m8 - 1.0).abs() < 1e-3 && (m16 - 1.0).abs() < 1e-3, "{m8} {m16}");
        let v = g8.values();
        for k in 0..grid.len() {
            if g8.distance(k) >= 8.0 {
                assert_eq!(v.values()[k], 0.0);
            }
        }
    }

    #[test]
    fn analytic_derivatives_match_finite_differences() {
        let y = [0.31, -0.22, 0.17];
        for axes in [vec![0], vec![1, 2], vec![0, 0], vec![2, 1, 0], vec![1, 1, 1], vec![0, 0, 2]] {
            let h = 1e-5;
            let mut yp = y;
            let mut ym = y;
            let last = *axes.last().unwrap();
            yp[last] += h;
            ym[last] -= h;
            let lower = &axes[..axes.len() - 1];
            let fd = (TestFunction::profile_derivative(&yp, lower)
                - TestFunction::profile_derivative(&ym, lower))
                / (2.0 * h);
            let exact = TestFunction::profile_derivative(&y, &axes);
            assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1.0), "{axes:?}: {fd} vs {exact}");
        }
    }

    #[test]
    fn fit_is_enforced() {
        let grid = TorusGrid::new(2, 32).unwrap();
        assert!(TestFunction::centered(grid, 11.0).is_err());
        assert!(TestFunction::centered(grid, 10.0).is_ok());
        assert!(TestFunction::centered(grid, 8.0).unwrap().derivative(&MultiIndex::new(vec![0; 4])).is_err());
    }

    #[test]
    fn constant_coefficients_give_local_derivative() {
        let grid = TorusGrid::new(2, 32).unwrap();
        let a = MatrixField::constant(grid, &[0.6, 0.0, 0.0, 0.6]).unwrap();
        let spectral = Spectral::new(grid);
        let pair = HierarchyPair::build(&a, &spectral, 1, SolverSettings::default(), Execution::Sequential).unwrap();
        let g = TestFunction::centered(grid, 6.0).unwrap();
        let d = representation_derivative(&pair, &spectral, &g, 0, 1, 1, SolverSettings::default()).unwrap();
        let gv = g.values();
        for k in 0..grid.len() {
            let m = d.at(k);
            let expect = [0.0, 0.0, gv.values()[k], 0.0];
            for (x, y) in m.iter().zip(expect) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
        assert!(d.auxiliary.h.max_abs() <= 1e-12);
    }

    #[test]
    fn local_part_and_flux_are_supported_near_the_ball() {
        let (_, spectral, pair) = sample_pair(2, 32, MapKind::SkewLogistic);
        let g = TestFunction::centered(spectral.grid(), 5.0).unwrap();
        let aux = h_solve(&pair, &spectral, &g, 0, 1, SolverSettings::default()).unwrap();
        let reach = 5.0 + 2.0;
        for k in 0..spectral.grid().len() {
            if g.distance(k) > reach {
                assert_eq!(aux.flux.norm_at(k), 0.0);
                assert_eq!(aux.local.norm_at(k), 0.0);
            }
        }
        assert!(aux.verified_residual <= SolverSettings::default().tolerance);
    }

    #[test]
    fn gateaux_matches_representation_in_2d() {
        let (a, spectral, _) = sample_pair(2, 32, MapKind::SkewLogistic);
        let grid = spectral.grid();
        let g = TestFunction::centered(grid, 6.0).unwrap();
        let mut delta = MatrixField::zeros(grid);
        for k in 0..grid.len() {
            let r = g.distance(k);
            if r < 9.0 {
                let w = (1.0 - r / 9.0) * 0.2;
                delta.entry_mut(0, 0)[k] = w;
                delta.entry_mut(0, 1)[k] = 0.5 * w;
                delta.entry_mut(1, 0)[k] = -0.3 * w;
                delta.entry_mut(1, 1)[k] = -w;
            }
        }
        let settings = SolverSettings::new(1e-13, 2000).unwrap();
        let table = gateaux_check(&a, &spectral, &g, 1, 0, 1, &delta, &[1e-4, 5e-5], settings).unwrap();
        for row in &table.rows {
            assert!(row.rel_error <= 1e-3, "{row:?}");
        }
        let ratio = table.error_ratios()[0];
        assert!((0.4..=0.6).contains(&ratio), "ratio {ratio}");
        assert!(table.rhs_h_part.abs() > 0.0);
    }

    #[test]
    fn zero_perturbation_gives_zero_rows() {
        let (a, spectral, _) = sample_pair(2, 16, MapKind::ScalarLogistic);
        let g = TestFunction::centered(spectral.grid(), 4.0).unwrap();
        let delta = MatrixField::zeros(spectral.grid());
        let t = gateaux_check(&a, &spectral, &g, 0, 0, 1, &delta, &[1e-3], SolverSettings::default()).unwrap();
        assert_eq!(t.rows[0].lhs, 0.0);
        assert_eq!(t.rows[0].rhs, 0.0);
    }

    #[test]
    fn ellipticity_violation_is_rejected() {
        let (a, spectral, _) = sample_pair(2, 16, MapKind::ScalarLogistic);
        let g = TestFunction::centered(spectral.grid(), 4.0).unwrap();
        let delta = MatrixField::constant(spectral.grid(), &[-10.0, 0.0, 0.0, -10.0]).unwrap();
        let r = gateaux_check(&a, &spectral, &g, 0, 0, 1, &delta, &[1.0], SolverSettings::default());
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn covariance_rhs_conventions() {
        let grid = TorusGrid::new(2, 16).unwrap();
        let spectral = Spectral::new(grid);
        let p: Vec<f64> = (0..grid.len()).map(|k| (k % 5) as f64).collect();
        let q: Vec<f64> = (0..grid.len()).map(|k| (k % 3) as f64 + 1.0).collect();
        let mut delta = ScalarField::zeros(grid);
        delta.values_mut()[0] = 2.5;
        let v = cov_bound_rhs(&spectral, &p, &q, &delta).unwrap();
        let expect: f64 = 2.5 * p.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        assert!((v - expect).abs() <= 1e-10 * expect);
        assert_eq!(cov_bound_rhs(&spectral, &vec![0.0; grid.len()], &q, &delta).unwrap(), 0.0);
    }
}
