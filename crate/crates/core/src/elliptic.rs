//! Divergence-form solver `-div(a grad u) = div f` on the torus and the
//! constant-coefficient spectral Poisson solver.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    adjoint_div, backward_diff_slice, dot, forward_diff_slice, MatrixField, ScalarField, Spectral,
    TorusGrid, VectorField,
};

pub const DEFAULT_TOLERANCE: f64 = 1e-11;
pub const DEFAULT_MAX_ITERATIONS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverSettings {
    /// Relative residual target `|b - A u| / |b|` in the Euclidean norm.
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings { tolerance: DEFAULT_TOLERANCE, max_iterations: DEFAULT_MAX_ITERATIONS }
    }
}

impl SolverSettings {
    pub fn new(tolerance: f64, max_iterations: usize) -> Result<Self> {
        if !(tolerance > 0.0 && tolerance < 1.0) {
            return Err(Error::param(format!("tolerance must lie in (0, 1), got {tolerance}")));
        }
        if max_iterations == 0 {
            return Err(Error::param("max_iterations must be positive"));
        }
        Ok(SolverSettings { tolerance, max_iterations })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// Final relative residual, recomputed from the returned iterate.
    pub residual: f64,
    pub converged: bool,
}

impl SolveReport {
    fn trivial() -> Self {
        SolveReport { iterations: 0, residual: 0.0, converged: true }
    }
}

/// `-div(a grad u)`.
pub fn apply_operator(a: &MatrixField, u: &ScalarField) -> Result<ScalarField> {
    if a.grid() != u.grid() {
        return Err(Error::Shape(format!("coefficients on {} vs field on {}", a.grid(), u.grid())));
    }
    let op = Operator::new(a);
    let mut out = vec![0.0; u.grid().len()];
    op.apply(u.values(), &mut out);
    Ok(ScalarField::from_vec_unchecked(u.grid(), out))
}

/// Matrix-free stencil `u -> -div(a grad u)`.
struct Operator<'a> {
    a: &'a MatrixField,
    entries: Vec<(usize, usize)>,
    grid: TorusGrid,
    grad: std::cell::RefCell<(Vec<Vec<f64>>, Vec<f64>, Vec<f64>)>,
}

impl<'a> Operator<'a> {
    fn new(a: &'a MatrixField) -> Self {
        let grid = a.grid();
        let n = grid.len();
        Operator {
            a,
            entries: a.nonzero_entries(),
            grid,
            grad: std::cell::RefCell::new((vec![vec![0.0; n]; grid.dim()], vec![0.0; n], vec![0.0; n])),
        }
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let d = self.grid.dim();
        let mut guard = self.grad.borrow_mut();
        let (grad, flux, tmp) = &mut *guard;
        for (axis, g) in grad.iter_mut().enumerate() {
            forward_diff_slice(&self.grid, u, axis, g);
        }
        let mut first_row = true;
        for r in 0..d {
            let mut started = false;
            for &(row, col) in self.entries.iter().filter(|(row, _)| *row == r) {
                let coef = self.a.entry(row, col);
                let g = &grad[col];
                if started {
                    flux.iter_mut().zip(coef.iter().zip(g)).for_each(|(f, (c, g))| *f += c * g);
                } else {
                    flux.iter_mut().zip(coef.iter().zip(g)).for_each(|(f, (c, g))| *f = c * g);
                    started = true;
                }
            }
            if started {
                backward_diff_slice(&self.grid, flux, r, tmp);
                if first_row {
                    out.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o = -t);
                    first_row = false;
                } else {
                    out.iter_mut().zip(tmp.iter()).for_each(|(o, t)| *o -= t);
                }
            }
        }
        if first_row {
            out.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Exact inverse of `-abar Laplacian` on mean-zero fields.
struct Preconditioner<'s> {
    spectral: &'s Spectral,
    inv_symbol: Vec<f64>,
    buf: std::cell::RefCell<Vec<Complex64>>,
}

impl<'s> Preconditioner<'s> {
    fn new(spectral: &'s Spectral, scale: f64) -> Self {
        let inv_symbol = spectral
            .laplacian_symbol()
            .iter()
            .enumerate()
            .map(|(k, &l)| if k == 0 { 0.0 } else { -1.0 / (scale * l) })
            .collect();
        Preconditioner {
            spectral,
            inv_symbol,
            buf: std::cell::RefCell::new(vec![Complex64::default(); spectral.grid().len()]),
        }
    }

    fn apply(&self, r: &[f64], out: &mut [f64]) {
        let mut buf = self.buf.borrow_mut();
        buf.iter_mut().zip(r).for_each(|(z, &v)| *z = Complex64::new(v, 0.0));
        self.spectral.forward_in_place(&mut buf);
        buf.iter_mut().zip(&self.inv_symbol).for_each(|(z, s)| *z *= s);
        self.spectral.inverse_in_place(&mut buf);
        out.iter_mut().zip(buf.iter()).for_each(|(o, z)| *o = z.re);
    }
}

/// Krylov solver bound to one coefficient field. Conjugate gradients when
/// `a` is symmetric, right-preconditioned BiCGStab otherwise.
pub struct DivFormSolver<'a> {
    a: &'a MatrixField,
    spectral: &'a Spectral,
    settings: SolverSettings,
    symmetric: bool,
    scale: f64,
}

impl<'a> DivFormSolver<'a> {
    pub fn new(a: &'a MatrixField, spectral: &'a Spectral, settings: SolverSettings) -> Result<Self> {
        if a.grid() != spectral.grid() {
            return Err(Error::Shape("coefficient field and spectral plan differ".into()));
        }
        if !a.is_finite() {
            return Err(Error::param("coefficient field contains non-finite values"));
        }
        let d = a.grid().dim();
        let mean = a.mean();
        let scale = (0..d).map(|r| mean[r * d + r]).sum::<f64>() / d as f64;
        if !(scale > 0.0) {
            return Err(Error::param("coefficient field has nonpositive mean trace"));
        }
        Ok(DivFormSolver { a, spectral, settings, symmetric: a.is_symmetric(), scale })
    }

    pub fn settings(&self) -> SolverSettings {
        self.settings
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    /// Solves `-div(a grad u) = div f`.
    pub fn solve_flux(&self, flux: &VectorField) -> Result<(ScalarField, SolveReport)> {
        self.solve(&adjoint_div(flux))
    }

    /// Solves `-div(a grad u) = rhs` for mean-zero `u`; `rhs` must have zero sum.
    pub fn solve(&self, rhs: &ScalarField) -> Result<(ScalarField, SolveReport)> {
        let grid = self.a.grid();
        if rhs.grid() != grid {
            return Err(Error::Shape("right-hand side on a different grid".into()));
        }
        let mut b = rhs.values().to_vec();
        let sum: f64 = b.iter().sum();
        let l1: f64 = b.iter().map(|v| v.abs()).sum();
        if sum.abs() > 1e-9 * l1.max(f64::MIN_POSITIVE) {
            return Err(Error::param(format!(
                "right-hand side is not compatible: grid sum {sum:e}"
            )));
        }
        let mean = sum / b.len() as f64;
        b.iter_mut().for_each(|v| *v -= mean);
        let bnorm = dot(&b, &b).sqrt();
        if bnorm == 0.0 {
            return Ok((ScalarField::zeros(grid), SolveReport::trivial()));
        }
        let op = Operator::new(self.a);
        let pre = Preconditioner::new(self.spectral, self.scale);
        let (mut x, iterations) = if self.symmetric {
            self.conjugate_gradient(&op, &pre, &b, bnorm)
        } else {
            self.bicgstab(&op, &pre, &b, bnorm)
        };
        let m = x.iter().sum::<f64>() / x.len() as f64;
        x.iter_mut().for_each(|v| *v -= m);
        let residual = true_residual(&op, &x, &b) / bnorm;
        let converged = residual <= self.settings.tolerance;
        Ok((ScalarField::from_vec_unchecked(grid, x), SolveReport { iterations, residual, converged }))
    }

    fn conjugate_gradient(
        &self,
        op: &Operator,
        pre: &Preconditioner,
        b: &[f64],
        bnorm: f64,
    ) -> (Vec<f64>, usize) {
        let n = b.len();
        let tol = self.settings.tolerance;
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let mut z = vec![0.0; n];
        let mut p = vec![0.0; n];
        let mut q = vec![0.0; n];
        let mut best = (f64::INFINITY, x.clone());
        let mut it = 0;
        'restart: while it < self.settings.max_iterations {
            pre.apply(&r, &mut z);
            p.copy_from_slice(&z);
            let mut rz = dot(&r, &z);
            while it < self.settings.max_iterations {
                it += 1;
                op.apply(&p, &mut q);
                let pq = dot(&p, &q);
                if !(pq > 0.0) {
                    break 'restart;
                }
                let alpha = rz / pq;
                axpy(alpha, &p, &mut x);
                axpy(-alpha, &q, &mut r);
                let rn = dot(&r, &r).sqrt() / bnorm;
                if rn < best.0 {
                    best.0 = rn;
                    best.1.copy_from_slice(&x);
                }
                if rn <= 0.5 * tol {
                    // Recurrence residuals drift; confirm against the true one.
                    let true_rn = true_residual(op, &x, b) / bnorm;
                    if true_rn <= tol {
                        return (x, it);
                    }
                    op.apply(&x, &mut q);
                    r.iter_mut().zip(b.iter().zip(&q)).for_each(|(r, (b, q))| *r = b - q);
                    continue 'restart;
                }
                pre.apply(&r, &mut z);
                let rz_new = dot(&r, &z);
                let beta = rz_new / rz;
                rz = rz_new;
                p.iter_mut().zip(&z).for_each(|(p, z)| *p = z + beta * *p);
            }
        }
        (best.1, it)
    }

    fn bicgstab(
        &self,
        op: &Operator,
        pre: &Preconditioner,
        b: &[f64],
        bnorm: f64,
    ) -> (Vec<f64>, usize) {
        let n = b.len();
        let tol = self.settings.tolerance;
        let mut x = vec![0.0; n];
        let mut r = b.to_vec();
        let mut p = vec![0.0; n];
        let mut v = vec![0.0; n];
        let mut ph = vec![0.0; n];
        let mut s = vec![0.0; n];
        let mut sh = vec![0.0; n];
        let mut t = vec![0.0; n];
        let mut best = (f64::INFINITY, x.clone());
        let mut it = 0;
        while it < self.settings.max_iterations {
            let shadow = r.clone();
            let (mut rho, mut alpha, mut omega) = (1.0, 1.0, 1.0);
            p.iter_mut().for_each(|v| *v = 0.0);
            v.iter_mut().for_each(|v| *v = 0.0);
            let mut restart = false;
            while it < self.settings.max_iterations && !restart {
                it += 1;
                let rho_new = dot(&shadow, &r);
                if rho_new == 0.0 || omega == 0.0 {
                    break;
                }
                let beta = (rho_new / rho) * (alpha / omega);
                rho = rho_new;
                p.iter_mut()
                    .zip(r.iter().zip(&v))
                    .for_each(|(p, (r, v))| *p = r + beta * (*p - omega * v));
                pre.apply(&p, &mut ph);
                op.apply(&ph, &mut v);
                let sv = dot(&shadow, &v);
                if sv == 0.0 {
                    break;
                }
                alpha = rho / sv;
                s.iter_mut().zip(r.iter().zip(&v)).for_each(|(s, (r, v))| *s = r - alpha * v);
                let sn = dot(&s, &s).sqrt() / bnorm;
                if sn <= 0.5 * tol {
                    axpy(alpha, &ph, &mut x);
                    if true_residual(op, &x, b) / bnorm <= tol {
                        return (x, it);
                    }
                    op.apply(&x, &mut t);
                    r.iter_mut().zip(b.iter().zip(&t)).for_each(|(r, (b, t))| *r = b - t);
                    restart = true;
                    continue;
                }
                pre.apply(&s, &mut sh);
                op.apply(&sh, &mut t);
                let tt = dot(&t, &t);
                omega = if tt > 0.0 { dot(&t, &s) / tt } else { 0.0 };
                axpy(alpha, &ph, &mut x);
                axpy(omega, &sh, &mut x);
                r.iter_mut().zip(s.iter().zip(&t)).for_each(|(r, (s, t))| *r = s - omega * t);
                let rn = dot(&r, &r).sqrt() / bnorm;
                if rn < best.0 {
                    best.0 = rn;
                    best.1.copy_from_slice(&x);
                }
                if rn <= 0.5 * tol {
                    if true_residual(op, &x, b) / bnorm <= tol {
                        return (x, it);
                    }
                    op.apply(&x, &mut t);
                    r.iter_mut().zip(b.iter().zip(&t)).for_each(|(r, (b, t))| *r = b - t);
                    restart = true;
                }
            }
            if !restart {
                // Breakdown: restart from the current iterate with a fresh shadow.
                if it >= self.settings.max_iterations {
                    break;
                }
                op.apply(&x, &mut t);
                r.iter_mut().zip(b.iter().zip(&t)).for_each(|(r, (b, t))| *r = b - t);
            }
        }
        if true_residual(op, &x, b) / bnorm <= best.0 {
            (x, it)
        } else {
            (best.1, it)
        }
    }
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(y, x)| *y += alpha * x);
}

fn true_residual(op: &Operator, x: &[f64], b: &[f64]) -> f64 {
    let mut ax = vec![0.0; x.len()];
    op.apply(x, &mut ax);
    ax.iter().zip(b).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt()
}

/// One-shot problem description.
#[derive(Debug, Clone)]
pub struct DivFormProblem {
    pub a: MatrixField,
    pub flux: VectorField,
    pub settings: SolverSettings,
}

pub fn solve_div_form(p: &DivFormProblem) -> Result<(ScalarField, SolveReport)> {
    let spectral = Spectral::new(p.a.grid());
    DivFormSolver::new(&p.a, &spectral, p.settings)?.solve_flux(&p.flux)
}

/// Mean-zero `u` with `div grad u = rhs`, by division by the discrete symbol.
pub fn poisson_solve(rhs: &ScalarField) -> Result<ScalarField> {
    poisson_solve_with(&Spectral::new(rhs.grid()), rhs)
}

pub fn poisson_solve_with(spectral: &Spectral, rhs: &ScalarField) -> Result<ScalarField> {
    let sum: f64 = rhs.values().iter().sum();
    let l1: f64 = rhs.values().iter().map(|v| v.abs()).sum();
    if sum.abs() > 1e-10 * l1.max(f64::MIN_POSITIVE) {
        return Err(Error::param(format!("Poisson right-hand side has nonzero mean (sum {sum:e})")));
    }
    let mut data: Vec<Complex64> = rhs.values().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    spectral.poisson_in_place(&mut data);
    Ok(ScalarField::from_vec_unchecked(rhs.grid(), data.into_iter().map(|z| z.re).collect()))
}
