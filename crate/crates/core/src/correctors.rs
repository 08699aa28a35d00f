//! Higher-order corrector hierarchy: correctors, flux correctors and
//! effective coefficients for one coefficient sample, plus moment scans.
//!
//! Level `n` holds one entry per multi-index `(i_1 ... i_n)`. Writing
//! `I' = (i_1 ... i_{n-1})` and `i = i_n`, the entry solves
//!
//! ```text
//! -div(a grad phi_I) = div f_I,    f_I = (a phi_I' - sigma_I') e_i,
//! abar_I' e_i        = mean(a (grad phi_I + phi_I' e_i)),
//! div sigma_I        = a grad phi_I + f_I - abar_I' e_i,
//! ```
//!
//! with `phi = 1`, `sigma = 0` at level zero. Ensemble averages are replaced
//! by torus averages of the sample.

use num_complex::Complex64;
use serde::Serialize;

use crate::elliptic::{DivFormSolver, SolveReport, SolverSettings};
use crate::ensemble::{EnsembleSpec, Sampler};
use crate::error::{Error, Result};
use crate::grid::{
    adjoint_div, backward_diff_slice, compensated_sum, gradient, MatrixField, MultiIndex,
    ScalarField, Spectral, TorusGrid, VectorField,
};
use crate::par::Execution;
use crate::stats::{fit_power_law, lp_moment, weighted_line, Point, PowerFit};

/// Skew-symmetric matrix field stored through its strict upper triangle.
#[derive(Debug, Clone, PartialEq)]
pub struct SkewField {
    grid: TorusGrid,
    upper: Vec<Vec<f64>>,
}

impl SkewField {
    pub fn zeros(grid: TorusGrid) -> Self {
        let d = grid.dim();
        SkewField { grid, upper: vec![vec![0.0; grid.len()]; d * (d - 1) / 2] }
    }

    fn slot(d: usize, r: usize, c: usize) -> usize {
        // Pairs (0,1), (0,2), ..., (1,2), ...
        r * (2 * d - r - 1) / 2 + (c - r - 1)
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    /// Entry `(r, c)` at cell `idx`.
    pub fn get(&self, r: usize, c: usize, idx: usize) -> f64 {
        let d = self.grid.dim();
        match r.cmp(&c) {
            std::cmp::Ordering::Equal => 0.0,
            std::cmp::Ordering::Less => self.upper[Self::slot(d, r, c)][idx],
            std::cmp::Ordering::Greater => -self.upper[Self::slot(d, c, r)][idx],
        }
    }

    /// Entry `(r, c)` as a field.
    pub fn entry(&self, r: usize, c: usize) -> ScalarField {
        let d = self.grid.dim();
        let values = match r.cmp(&c) {
            std::cmp::Ordering::Equal => vec![0.0; self.grid.len()],
            std::cmp::Ordering::Less => self.upper[Self::slot(d, r, c)].clone(),
            std::cmp::Ordering::Greater => {
                self.upper[Self::slot(d, c, r)].iter().map(|v| -v).collect()
            }
        };
        ScalarField::from_vec_unchecked(self.grid, values)
    }

    /// Dense matrix field, skew by construction.
    pub fn to_matrix(&self) -> MatrixField {
        let d = self.grid.dim();
        let mut m = MatrixField::zeros(self.grid);
        for r in 0..d {
            for c in r + 1..d {
                let u = &self.upper[Self::slot(d, r, c)];
                m.entry_mut(r, c).copy_from_slice(u);
                m.entry_mut(c, r).iter_mut().zip(u).for_each(|(x, y)| *x = -y);
            }
        }
        m
    }

    /// `(div sigma)_r = sum_c D^-_c sigma_rc`.
    pub fn div(&self) -> VectorField {
        let g = self.grid;
        let d = g.dim();
        let mut out = VectorField::zeros(g);
        let mut tmp = vec![0.0; g.len()];
        for r in 0..d {
            for c in r + 1..d {
                let u = &self.upper[Self::slot(d, r, c)];
                // sigma_rc contributes D^-_c to row r; sigma_cr = -sigma_rc adds -D^-_r to row c.
                backward_diff_slice(&g, u, c, &mut tmp);
                out.component_mut(r).iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
                backward_diff_slice(&g, u, r, &mut tmp);
                out.component_mut(c).iter_mut().zip(&tmp).for_each(|(o, t)| *o -= t);
            }
        }
        out
    }

    /// `self += weight * other` with a cellwise weight.
    pub fn add_weighted(&mut self, other: &SkewField, weight: &[f64]) {
        for (u, v) in self.upper.iter_mut().zip(&other.upper) {
            u.iter_mut().zip(v.iter().zip(weight)).for_each(|(u, (v, w))| *u += v * w);
        }
    }

    /// `sigma e_col` as a vector field.
    pub fn column(&self, col: usize) -> VectorField {
        let d = self.grid.dim();
        let comps = (0..d).map(|r| self.entry(r, col).into_values()).collect();
        VectorField::from_components(self.grid, comps).expect("shape")
    }

    /// Frobenius norm of the full matrix at one cell.
    pub fn norm_at(&self, idx: usize) -> f64 {
        (2.0 * self.upper.iter().map(|u| u[idx] * u[idx]).sum::<f64>()).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.upper.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.upper.iter().flatten().all(|v| v.is_finite())
    }
}

/// Objects attached to one multi-index.
#[derive(Debug, Clone)]
pub struct CorrectorEntry {
    pub index: MultiIndex,
    pub phi: ScalarField,
    pub sigma: SkewField,
    /// `abar_I' e_{i_n}` for this entry's `I' = prefix`, `i_n = last`.
    pub abar_column: Vec<f64>,
    pub report: SolveReport,
    /// Max-norm of `div sigma - q` after construction.
    pub flux_residual: f64,
}

impl CorrectorEntry {
    pub fn grad_phi(&self) -> VectorField {
        gradient(&self.phi)
    }
}

#[derive(Debug, Clone)]
pub struct CorrectorHierarchy {
    a: MatrixField,
    /// `levels[n - 1]` holds level `n`, entries in linear multi-index order.
    levels: Vec<Vec<CorrectorEntry>>,
}

/// Flux `f_I = (a phi_I' - sigma_I') e_i` driving the entry `I = (I', i)`.
fn driving_flux(a: &MatrixField, parent: Option<&CorrectorEntry>, axis: usize) -> VectorField {
    let grid = a.grid();
    let d = grid.dim();
    let comps = (0..d)
        .map(|r| {
            let coef = a.entry(r, axis);
            match parent {
                None => coef.to_vec(),
                Some(p) => {
                    let mut v: Vec<f64> =
                        coef.iter().zip(p.phi.values()).map(|(c, phi)| c * phi).collect();
                    if r != axis {
                        v.iter_mut()
                            .enumerate()
                            .for_each(|(k, x)| *x -= p.sigma.get(r, axis, k));
                    }
                    v
                }
            }
        })
        .collect();
    VectorField::from_components(grid, comps).expect("shape")
}

/// Skew `sigma` with `div sigma = q` for a divergence-free, mean-zero `q`.
fn flux_potential(spectral: &Spectral, q: &VectorField) -> SkewField {
    let grid = spectral.grid();
    let d = grid.dim();
    let lap = spectral.laplacian_symbol();
    let potentials: Vec<Vec<Complex64>> = (0..d)
        .map(|r| {
            let mut w = spectral.forward_real(q.component(r));
            w[0] = Complex64::default();
            w.iter_mut().zip(lap.iter()).skip(1).for_each(|(z, l)| *z /= l);
            w
        })
        .collect();
    let mut sigma = SkewField::zeros(grid);
    for r in 0..d {
        for c in r + 1..d {
            let hat: Vec<Complex64> = (0..grid.len())
                .map(|k| {
                    spectral.difference_symbol(k, c) * potentials[r][k]
                        - spectral.difference_symbol(k, r) * potentials[c][k]
                })
                .collect();
            sigma.upper[SkewField::slot(d, r, c)] = spectral.inverse_real(hat);
        }
    }
    sigma
}

/// Builds one entry of level `parent.order() + 1`.
fn build_entry(
    a: &MatrixField,
    spectral: &Spectral,
    solver: &DivFormSolver,
    parent: Option<&CorrectorEntry>,
    index: MultiIndex,
) -> Result<CorrectorEntry> {
    let grid = a.grid();
    let d = grid.dim();
    let axis = index.last().expect("nonempty multi-index");
    let f = driving_flux(a, parent, axis);
    let rhs = adjoint_div(&f);
    let (phi, report) = solver.solve(&rhs)?;
    if !report.converged {
        return Err(Error::NotConverged {
            context: format!("corrector {index}"),
            iterations: report.iterations,
            residual: report.residual,
        });
    }
    let mut flux = a.apply(&gradient(&phi))?;
    let abar_column: Vec<f64> = (0..d)
        .map(|r| {
            let own = flux.component(r);
            let coef = a.entry(r, axis);
            let total = match parent {
                None => compensated_sum(own.iter().zip(coef).map(|(x, c)| x + c)),
                Some(p) => compensated_sum(
                    own.iter().zip(coef.iter().zip(p.phi.values())).map(|(x, (c, y))| x + c * y),
                ),
            };
            total / grid.len() as f64
        })
        .collect();
    // q = a grad phi + f - abar e_i
    flux.add_assign(&f);
    for (r, &m) in abar_column.iter().enumerate() {
        flux.component_mut(r).iter_mut().for_each(|v| *v -= m);
    }
    let q = flux;
    let div_q = adjoint_div(&q).norm();
    let bound = 10.0 * solver.settings().tolerance * rhs.norm() + 1e-13 * q.max_abs();
    if div_q > bound {
        return Err(Error::Inconsistent(format!(
            "flux of corrector {index} has divergence {div_q:.3e} above {bound:.3e}"
        )));
    }
    let sigma = flux_potential(spectral, &q);
    let div_sigma = sigma.div();
    let mut flux_residual = 0.0f64;
    for r in 0..d {
        let mean = q.component(r).iter().sum::<f64>() / grid.len() as f64;
        for (s, v) in div_sigma.component(r).iter().zip(q.component(r)) {
            flux_residual = flux_residual.max((s - (v - mean)).abs());
        }
    }
    Ok(CorrectorEntry { index, phi, sigma, abar_column, report, flux_residual })
}

impl CorrectorHierarchy {
    /// Builds levels `1..=depth`; `depth` may not exceed the grid's
    /// hierarchy depth.
    pub fn build(
        a: &MatrixField,
        spectral: &Spectral,
        depth: usize,
        settings: SolverSettings,
        exec: Execution,
    ) -> Result<Self> {
        let grid = a.grid();
        if depth == 0 || depth > grid.hierarchy_depth() {
            return Err(Error::param(format!(
                "hierarchy depth must lie in 1..={} for d = {}, got {depth}",
                grid.hierarchy_depth(),
                grid.dim()
            )));
        }
        if spectral.grid() != grid {
            return Err(Error::Shape("spectral plan does not match coefficient grid".into()));
        }
        let solver = DivFormSolver::new(a, spectral, settings)?;
        let d = grid.dim();
        let mut levels: Vec<Vec<CorrectorEntry>> = Vec::with_capacity(depth);
        for n in 1..=depth {
            let parents = levels.last();
            let count = d.pow(n as u32);
            let entries = exec.try_map(count, |id| {
                let index = MultiIndex::from_linear(n, d, id);
                let parent = parents.map(|p| &p[id / d]);
                build_entry(a, spectral, &solver, parent, index)
            })?;
            levels.push(entries);
        }
        Ok(CorrectorHierarchy { a: a.clone(), levels })
    }

    pub fn coefficients(&self) -> &MatrixField {
        &self.a
    }

    pub fn grid(&self) -> TorusGrid {
        self.a.grid()
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn level(&self, n: usize) -> &[CorrectorEntry] {
        &self.levels[n - 1]
    }

    pub fn entry(&self, index: &MultiIndex) -> Result<&CorrectorEntry> {
        let n = index.order();
        if n == 0 || n > self.depth() {
            return Err(Error::param(format!("no corrector level {n} in a depth-{} hierarchy", self.depth())));
        }
        index.check(self.grid().dim())?;
        Ok(&self.levels[n - 1][index.linear(self.grid().dim())])
    }

    /// Corrector field; level zero is the constant one.
    pub fn phi(&self, index: &MultiIndex) -> Result<ScalarField> {
        if index.order() == 0 {
            return Ok(ScalarField::constant(self.grid(), 1.0));
        }
        Ok(self.entry(index)?.phi.clone())
    }

    /// `abar^n_{prefix}` as a row-major `d x d` matrix, `n = prefix.order() + 1`.
    pub fn abar(&self, prefix: &MultiIndex) -> Result<Vec<f64>> {
        let d = self.grid().dim();
        let mut m = vec![0.0; d * d];
        for col in 0..d {
            let e = self.entry(&prefix.pushed(col))?;
            for r in 0..d {
                m[r * d + col] = e.abar_column[r];
            }
        }
        Ok(m)
    }

    /// Largest solver residual, flux-identity residual and iteration count.
    pub fn diagnostics(&self) -> HierarchyDiagnostics {
        let mut out = HierarchyDiagnostics::default();
        for e in self.levels.iter().flatten() {
            out.max_solver_residual = out.max_solver_residual.max(e.report.residual);
            out.max_flux_residual = out.max_flux_residual.max(e.flux_residual);
            out.max_iterations = out.max_iterations.max(e.report.iterations);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct HierarchyDiagnostics {
    pub max_solver_residual: f64,
    pub max_flux_residual: f64,
    pub max_iterations: usize,
}

/// Hierarchy for `a` together with the hierarchy for the transpose.
#[derive(Debug, Clone)]
pub struct HierarchyPair {
    primal: CorrectorHierarchy,
    /// `None` when `a` is symmetric and the dual coincides with the primal.
    dual: Option<CorrectorHierarchy>,
}

impl HierarchyPair {
    pub fn build(
        a: &MatrixField,
        spectral: &Spectral,
        depth: usize,
        settings: SolverSettings,
        exec: Execution,
    ) -> Result<Self> {
        let primal = CorrectorHierarchy::build(a, spectral, depth, settings, exec)?;
        let dual = if a.is_symmetric() {
            None
        } else {
            Some(CorrectorHierarchy::build(&a.transpose(), spectral, depth, settings, exec)?)
        };
        Ok(HierarchyPair { primal, dual })
    }

    pub fn primal(&self) -> &CorrectorHierarchy {
        &self.primal
    }

    pub fn dual(&self) -> &CorrectorHierarchy {
        self.dual.as_ref().unwrap_or(&self.primal)
    }

    pub fn depth(&self) -> usize {
        self.primal.depth()
    }
}

/// Max-norm residual of
/// `(a phi_I' - sigma_I') e_i = -a grad phi_I + div sigma_I + abar_I' e_i`
/// over all entries of level `k`.
pub fn corrector_relation_check(h: &CorrectorHierarchy, k: usize) -> Result<f64> {
    if k == 0 || k > h.depth() {
        return Err(Error::param(format!("level {k} not available")));
    }
    let a = h.coefficients();
    let d = h.grid().dim();
    let mut worst = 0.0f64;
    for e in h.level(k) {
        let axis = e.index.last().expect("nonempty");
        let parent = if k == 1 { None } else { Some(h.entry(&e.index.prefix())?) };
        let lhs = driving_flux(a, parent, axis);
        let flux = a.apply(&e.grad_phi())?;
        let div_sigma = e.sigma.div();
        for r in 0..d {
            for idx in 0..h.grid().len() {
                let rhs = -flux.component(r)[idx] + div_sigma.component(r)[idx] + e.abar_column[r];
                worst = worst.max((lhs.component(r)[idx] - rhs).abs());
            }
        }
    }
    Ok(worst)
}

/// Envelope `mu_{d,n}(x)` of the corrector moment bounds, with `depth` the
/// hierarchy depth of the dimension.
pub fn moment_envelope(dim: usize, level: usize, x: f64) -> f64 {
    let depth = dim.div_ceil(2);
    if level < depth {
        1.0
    } else if dim.is_multiple_of(2) {
        (2.0 + x.abs()).ln().sqrt()
    } else {
        1.0 + x.abs().sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum MomentQuantity {
    GradPhi,
    Phi,
    Sigma,
}

impl MomentQuantity {
    pub const ALL: [MomentQuantity; 3] =
        [MomentQuantity::GradPhi, MomentQuantity::Phi, MomentQuantity::Sigma];

    pub fn name(self) -> &'static str {
        match self {
            MomentQuantity::GradPhi => "grad_phi",
            MomentQuantity::Phi => "phi",
            MomentQuantity::Sigma => "sigma",
        }
    }
}

pub const MOMENT_ORDERS: [u32; 2] = [2, 4];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentRow {
    pub side: usize,
    pub level: usize,
    pub quantity: MomentQuantity,
    pub p: u32,
    /// `<|X|^p>^(1/p)`, averaged over space, multi-indices and samples.
    pub value: f64,
    pub stderr: f64,
    pub envelope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthFit {
    pub level: usize,
    pub quantity: MomentQuantity,
    pub p: u32,
    pub power: PowerFit,
    /// R^2 of a straight-line fit of `value^p` against `ln M`.
    pub log_r_squared: f64,
}

impl GrowthFit {
    /// Growth consistent with a logarithm: the `ln M` fit explains the data
    /// better than a power law, or the power-law exponent is at most 0.2.
    pub fn log_consistent(&self) -> bool {
        self.log_r_squared > self.power.r_squared || self.power.slope <= 0.2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentStats {
    pub dim: usize,
    pub samples: usize,
    pub rows: Vec<MomentRow>,
    pub fits: Vec<GrowthFit>,
}

impl MomentStats {
    pub fn fit(&self, level: usize, quantity: MomentQuantity, p: u32) -> Option<&GrowthFit> {
        self.fits.iter().find(|f| f.level == level && f.quantity == quantity && f.p == p)
    }
}

/// Per-sample spatial averages of `|X|^p`, one per (level, quantity, p).
fn sample_moments(h: &CorrectorHierarchy) -> Vec<f64> {
    let grid = h.grid();
    let n = grid.len() as f64;
    let mut out = Vec::new();
    for level in 1..=h.depth() {
        let entries = h.level(level);
        let count = entries.len() as f64;
        for q in MomentQuantity::ALL {
            let mut acc = [0.0; MOMENT_ORDERS.len()];
            for e in entries {
                let pointwise: Vec<f64> = match q {
                    MomentQuantity::GradPhi => {
                        let g = e.grad_phi();
                        (0..grid.len()).map(|k| g.norm_at(k)).collect()
                    }
                    MomentQuantity::Phi => e.phi.values().iter().map(|v| v.abs()).collect(),
                    MomentQuantity::Sigma => (0..grid.len()).map(|k| e.sigma.norm_at(k)).collect(),
                };
                for (slot, &p) in acc.iter_mut().zip(MOMENT_ORDERS.iter()) {
                    *slot += pointwise.iter().map(|v| v.powi(p as i32)).sum::<f64>() / n / count;
                }
            }
            out.extend_from_slice(&acc);
        }
    }
    out
}

/// Monte Carlo moments of the hierarchy against the torus side.
pub fn moment_scan(
    base: &EnsembleSpec,
    sizes: &[usize],
    samples: usize,
    settings: SolverSettings,
    exec: Execution,
) -> Result<MomentStats> {
    if sizes.len() < 3 || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("moment scan needs at least 3 strictly ascending sizes"));
    }
    if samples < 2 {
        return Err(Error::param("moment scan needs at least 2 samples per size"));
    }
    let dim = base.grid.dim();
    let depth = base.grid.hierarchy_depth();
    let mut rows = Vec::new();
    for &side in sizes {
        let grid = TorusGrid::new(dim, side)?;
        let spec = EnsembleSpec { grid, ..*base };
        let sampler = Sampler::new(spec);
        let per_sample = exec.try_map(samples, |s| {
            let a = sampler.coefficients(s as u64);
            let h = CorrectorHierarchy::build(&a, sampler.spectral(), depth, settings, Execution::Sequential)?;
            Ok::<_, Error>(sample_moments(&h))
        })?;
        let mut slot = 0;
        for level in 1..=depth {
            for quantity in MomentQuantity::ALL {
                for &p in MOMENT_ORDERS.iter() {
                    let column: Vec<f64> = per_sample.iter().map(|v| v[slot]).collect();
                    let (value, stderr) = lp_moment(&column, p as f64);
                    rows.push(MomentRow {
                        side,
                        level,
                        quantity,
                        p,
                        value,
                        stderr,
                        envelope: moment_envelope(dim, level, side as f64),
                    });
                    slot += 1;
                }
            }
        }
    }
    let mut fits = Vec::new();
    for level in 1..=depth {
        for quantity in MomentQuantity::ALL {
            for &p in MOMENT_ORDERS.iter() {
                let series: Vec<&MomentRow> = rows
                    .iter()
                    .filter(|r| r.level == level && r.quantity == quantity && r.p == p)
                    .collect();
                let points: Vec<Point> =
                    series.iter().map(|r| Point::new(r.side as f64, r.value, r.stderr)).collect();
                let Ok(power) = fit_power_law(&points) else { continue };
                let xs: Vec<f64> = series.iter().map(|r| (r.side as f64).ln()).collect();
                let ys: Vec<f64> = series.iter().map(|r| r.value.powi(p as i32)).collect();
                let ws = vec![1.0; xs.len()];
                let log_r_squared = weighted_line(&xs, &ys, &ws).map(|l| l.r_squared).unwrap_or(0.0);
                fits.push(GrowthFit { level, quantity, p, power, log_r_squared });
            }
        }
    }
    Ok(MomentStats { dim, samples, rows, fits })
}
