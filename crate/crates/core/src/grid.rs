//! Periodic lattice container, discrete calculus and Fourier utilities.
//!
//! Lattice spacing is 1. Cells are stored row-major: axis 0 has the largest
//! stride and axis `d - 1` is contiguous. The gradient uses forward
//! differences and the divergence is the negative adjoint (backward
//! differences), so that
//!
//! ```text
//! sum_x u(x) (div F)(x) = - sum_x grad u(x) . F(x)
//! ```
//!
//! holds exactly for periodic fields.

use std::fmt;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TorusGrid {
    dim: usize,
    side: usize,
}

impl TorusGrid {
    pub fn new(dim: usize, side: usize) -> Result<Self> {
        if dim != 2 && dim != 3 {
            return Err(Error::param(format!("dimension must be 2 or 3, got {dim}")));
        }
        if side < 8 || !side.is_power_of_two() {
            return Err(Error::param(format!(
                "side must be a power of two >= 8, got {side}"
            )));
        }
        let cells = side
            .checked_pow(dim as u32)
            .and_then(|n| n.checked_mul(dim * dim * std::mem::size_of::<f64>()))
            .ok_or_else(|| Error::param(format!("{side}^{dim} cells overflow the address space")))?;
        let _ = cells;
        Ok(TorusGrid { dim, side })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of cells, `side^dim`.
    pub fn len(&self) -> usize {
        self.side.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Depth of the corrector hierarchy: the smallest integer `>= d/2`
    /// (1 for d = 2, 2 for d = 3).
    pub fn hierarchy_depth(&self) -> usize {
        self.dim.div_ceil(2)
    }

    pub fn stride(&self, axis: usize) -> usize {
        self.side.pow((self.dim - 1 - axis) as u32)
    }

    pub fn check_axis(&self, axis: usize) -> Result<()> {
        if axis >= self.dim {
            Err(Error::param(format!(
                "axis {axis} out of range for a {}-dimensional grid",
                self.dim
            )))
        } else {
            Ok(())
        }
    }

    pub fn coords(&self, mut index: usize) -> [usize; 3] {
        let mut c = [0usize; 3];
        for axis in (0..self.dim).rev() {
            c[axis] = index % self.side;
            index /= self.side;
        }
        c
    }

    /// Linear index of integer coordinates, wrapped periodically.
    pub fn index(&self, coords: &[i64]) -> usize {
        let m = self.side as i64;
        coords
            .iter()
            .take(self.dim)
            .fold(0usize, |acc, &c| acc * self.side + c.rem_euclid(m) as usize)
    }

    /// Signed minimal-image displacement of coordinate `c` relative to `origin`.
    pub fn min_image(&self, c: usize, origin: usize) -> i64 {
        let m = self.side as i64;
        let mut d = (c as i64 - origin as i64).rem_euclid(m);
        if d > m / 2 {
            d -= m;
        }
        d
    }

    /// Minimal-image displacement vector from `origin` to cell `index`.
    pub fn displacement(&self, index: usize, origin: &[usize]) -> [f64; 3] {
        let c = self.coords(index);
        let mut out = [0.0; 3];
        for axis in 0..self.dim {
            out[axis] = self.min_image(c[axis], origin[axis]) as f64;
        }
        out
    }

    fn check_same(&self, other: &TorusGrid) -> Result<()> {
        if self != other {
            Err(Error::Shape(format!("grid {self} vs {other}")))
        } else {
            Ok(())
        }
    }
}

impl fmt::Display for TorusGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}^{}", self.side, self.dim)
    }
}

/// Ordered list of axes `i_1 ... i_k` (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct MultiIndex(Vec<usize>);

impl MultiIndex {
    pub fn new(axes: Vec<usize>) -> Self {
        MultiIndex(axes)
    }

    pub fn empty() -> Self {
        MultiIndex(Vec::new())
    }

    pub fn order(&self) -> usize {
        self.0.len()
    }

    pub fn axes(&self) -> &[usize] {
        &self.0
    }

    pub fn last(&self) -> Option<usize> {
        self.0.last().copied()
    }

    /// All but the last axis.
    pub fn prefix(&self) -> MultiIndex {
        MultiIndex(self.0[..self.0.len().saturating_sub(1)].to_vec())
    }

    pub fn pushed(&self, axis: usize) -> MultiIndex {
        let mut v = self.0.clone();
        v.push(axis);
        MultiIndex(v)
    }

    pub fn prepended(&self, axis: usize) -> MultiIndex {
        let mut v = Vec::with_capacity(self.0.len() + 1);
        v.push(axis);
        v.extend_from_slice(&self.0);
        MultiIndex(v)
    }

    /// Position among all multi-indices of the same order, first axis most
    /// significant.
    pub fn linear(&self, dim: usize) -> usize {
        self.0.iter().fold(0, |acc, &i| acc * dim + i)
    }

    pub fn from_linear(order: usize, dim: usize, mut id: usize) -> MultiIndex {
        let mut v = vec![0; order];
        for slot in v.iter_mut().rev() {
            *slot = id % dim;
            id /= dim;
        }
        MultiIndex(v)
    }

    /// Every multi-index of the given order, in linear order.
    pub fn all(order: usize, dim: usize) -> impl Iterator<Item = MultiIndex> {
        (0..dim.pow(order as u32)).map(move |id| MultiIndex::from_linear(order, dim, id))
    }

    pub fn check(&self, dim: usize) -> Result<()> {
        match self.0.iter().find(|&&a| a >= dim) {
            Some(a) => Err(Error::param(format!("index entry {a} out of range 0..{dim}"))),
            None => Ok(()),
        }
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, a) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{}", a + 1)?;
        }
        write!(f, ")")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: TorusGrid,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: TorusGrid) -> Self {
        ScalarField { grid, values: vec![0.0; grid.len()] }
    }

    pub fn constant(grid: TorusGrid, value: f64) -> Self {
        ScalarField { grid, values: vec![value; grid.len()] }
    }

    pub fn from_vec(grid: TorusGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::Shape(format!(
                "{} values for a grid of {} cells",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::param("field contains non-finite values"));
        }
        Ok(ScalarField { grid, values })
    }

    pub(crate) fn from_vec_unchecked(grid: TorusGrid, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        ScalarField { grid, values }
    }

    /// Evaluates `f` at every cell, passing integer coordinates.
    pub fn from_fn(grid: TorusGrid, mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let values = (0..grid.len())
            .map(|idx| {
                let c = grid.coords(idx);
                f(&c[..grid.dim()])
            })
            .collect();
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn mean(&self) -> f64 {
        compensated_sum(self.values.iter().copied()) / self.values.len() as f64
    }

    pub fn dot(&self, other: &ScalarField) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn norm(&self) -> f64 {
        dot(&self.values, &self.values).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Subtracts the grid average.
    pub fn remove_mean(&mut self) {
        let m = self.mean();
        self.values.iter_mut().for_each(|v| *v -= m);
    }

    /// Periodic translation: `out(x) = self(x - shift)`.
    pub fn translated(&self, shift: &[i64]) -> ScalarField {
        let g = self.grid;
        let mut out = vec![0.0; g.len()];
        for (idx, slot) in out.iter_mut().enumerate() {
            let c = g.coords(idx);
            let src: Vec<i64> = (0..g.dim()).map(|a| c[a] as i64 - shift[a]).collect();
            *slot = self.values[g.index(&src)];
        }
        ScalarField { grid: g, values: out }
    }
}

/// `d` scalar components stored component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    grid: TorusGrid,
    comps: Vec<Vec<f64>>,
}

impl VectorField {
    pub fn zeros(grid: TorusGrid) -> Self {
        VectorField { grid, comps: vec![vec![0.0; grid.len()]; grid.dim()] }
    }

    pub fn from_components(grid: TorusGrid, comps: Vec<Vec<f64>>) -> Result<Self> {
        if comps.len() != grid.dim() || comps.iter().any(|c| c.len() != grid.len()) {
            return Err(Error::Shape("vector field components do not match grid".into()));
        }
        Ok(VectorField { grid, comps })
    }

    /// Constant field equal to the unit vector `e_axis`.
    pub fn unit(grid: TorusGrid, axis: usize) -> Self {
        let mut v = VectorField::zeros(grid);
        v.comps[axis].iter_mut().for_each(|x| *x = 1.0);
        v
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.comps[axis]
    }

    pub fn component_mut(&mut self, axis: usize) -> &mut [f64] {
        &mut self.comps[axis]
    }

    pub fn components(&self) -> &[Vec<f64>] {
        &self.comps
    }

    pub fn into_components(self) -> Vec<Vec<f64>> {
        self.comps
    }

    /// Euclidean norm of the vector at one cell.
    pub fn norm_at(&self, idx: usize) -> f64 {
        self.comps.iter().map(|c| c[idx] * c[idx]).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.comps.iter().map(|c| max_abs(c)).fold(0.0, f64::max)
    }

    pub fn dot(&self, other: &VectorField) -> f64 {
        self.comps.iter().zip(&other.comps).map(|(a, b)| dot(a, b)).sum()
    }

    pub fn add_assign(&mut self, other: &VectorField) {
        for (a, b) in self.comps.iter_mut().zip(&other.comps) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.comps.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_finite(&self) -> bool {
        self.comps.iter().flatten().all(|v| v.is_finite())
    }
}

/// `d x d` matrix per cell, entries stored row-major then cell-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    grid: TorusGrid,
    entries: Vec<Vec<f64>>,
}

impl MatrixField {
    pub fn zeros(grid: TorusGrid) -> Self {
        let d = grid.dim();
        MatrixField { grid, entries: vec![vec![0.0; grid.len()]; d * d] }
    }

    /// Same matrix at every cell; `m` is row-major `d x d`.
    pub fn constant(grid: TorusGrid, m: &[f64]) -> Result<Self> {
        let d = grid.dim();
        if m.len() != d * d {
            return Err(Error::Shape(format!("expected {} matrix entries", d * d)));
        }
        Ok(MatrixField { grid, entries: m.iter().map(|&v| vec![v; grid.len()]).collect() })
    }

    /// `s(x) * Id`.
    pub fn isotropic(scale: &ScalarField) -> Self {
        let grid = scale.grid();
        let d = grid.dim();
        let mut out = MatrixField::zeros(grid);
        for r in 0..d {
            out.entries[r * d + r].copy_from_slice(scale.values());
        }
        out
    }

    pub fn from_entries(grid: TorusGrid, entries: Vec<Vec<f64>>) -> Result<Self> {
        let d = grid.dim();
        if entries.len() != d * d || entries.iter().any(|e| e.len() != grid.len()) {
            return Err(Error::Shape("matrix field entries do not match grid".into()));
        }
        Ok(MatrixField { grid, entries })
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    pub fn entry(&self, row: usize, col: usize) -> &[f64] {
        &self.entries[row * self.grid.dim() + col]
    }

    pub fn entry_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let d = self.grid.dim();
        &mut self.entries[row * d + col]
    }

    /// The `d x d` matrix at one cell, row-major.
    pub fn at(&self, idx: usize) -> Vec<f64> {
        self.entries.iter().map(|e| e[idx]).collect()
    }

    /// Pointwise transpose.
    pub fn transpose(&self) -> MatrixField {
        let d = self.grid.dim();
        let mut entries = Vec::with_capacity(d * d);
        for r in 0..d {
            for c in 0..d {
                entries.push(self.entries[c * d + r].clone());
            }
        }
        MatrixField { grid: self.grid, entries }
    }

    pub fn is_symmetric(&self) -> bool {
        let d = self.grid.dim();
        (0..d).all(|r| (0..r).all(|c| self.entries[r * d + c] == self.entries[c * d + r]))
    }

    /// Entries that are not identically zero, as `(row, col)` pairs.
    pub fn nonzero_entries(&self) -> Vec<(usize, usize)> {
        let d = self.grid.dim();
        (0..d * d)
            .filter(|&k| self.entries[k].iter().any(|&v| v != 0.0))
            .map(|k| (k / d, k % d))
            .collect()
    }

    /// `self + t * other`.
    pub fn add_scaled(&self, t: f64, other: &MatrixField) -> Result<MatrixField> {
        self.grid.check_same(&other.grid)?;
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + t * y).collect())
            .collect();
        Ok(MatrixField { grid: self.grid, entries })
    }

    /// Average of each entry over the torus, row-major.
    pub fn mean(&self) -> Vec<f64> {
        self.entries.iter().map(|e| compensated_sum(e.iter().copied()) / e.len() as f64).collect()
    }

    /// `(M v)(x)` cellwise.
    pub fn apply(&self, v: &VectorField) -> Result<VectorField> {
        self.grid.check_same(&v.grid)?;
        let d = self.grid.dim();
        let mut out = VectorField::zeros(self.grid);
        for r in 0..d {
            let o = &mut out.comps[r];
            for c in 0..d {
                let m = &self.entries[r * d + c];
                let src = &v.comps[c];
                o.iter_mut().zip(m.iter().zip(src)).for_each(|(o, (a, b))| *o += a * b);
            }
        }
        Ok(out)
    }

    /// Column `col` of the matrix field as a vector field.
    pub fn column(&self, col: usize) -> VectorField {
        let d = self.grid.dim();
        VectorField {
            grid: self.grid,
            comps: (0..d).map(|r| self.entries[r * d + col].clone()).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|c| max_abs(c)).fold(0.0, f64::max)
    }

    /// Pointwise `(a - b) : (a - b)` maximum, useful in tests.
    pub fn max_abs_diff(&self, other: &MatrixField) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().flatten().all(|v| v.is_finite())
    }
}

/// Neumaier-compensated sum; exact for sums of equal values on power-of-two grids.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut carry = 0.0f64;
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Step {
    Forward,
    Backward,
}

fn diff_into(grid: &TorusGrid, src: &[f64], axis: usize, step: Step, out: &mut [f64]) {
    let m = grid.side();
    let inner = grid.stride(axis);
    let block = m * inner;
    if inner == 1 {
        for (o, a) in out.chunks_exact_mut(m).zip(src.chunks_exact(m)) {
            match step {
                Step::Forward => {
                    o[..m - 1].iter_mut().zip(a.windows(2)).for_each(|(o, w)| *o = w[1] - w[0]);
                    o[m - 1] = a[0] - a[m - 1];
                }
                Step::Backward => {
                    o[1..].iter_mut().zip(a.windows(2)).for_each(|(o, w)| *o = w[1] - w[0]);
                    o[0] = a[0] - a[m - 1];
                }
            }
        }
        return;
    }
    for base in (0..grid.len()).step_by(block) {
        for i in 0..m {
            let here = base + i * inner;
            let there = match step {
                Step::Forward => base + ((i + 1) % m) * inner,
                Step::Backward => base + ((i + m - 1) % m) * inner,
            };
            let (o, a, b) = (
                &mut out[here..here + inner],
                &src[here..here + inner],
                &src[there..there + inner],
            );
            match step {
                Step::Forward => o.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (a, b))| *o = b - a),
                Step::Backward => o.iter_mut().zip(a.iter().zip(b)).for_each(|(o, (a, b))| *o = a - b),
            }
        }
    }
}

pub(crate) fn forward_diff_slice(grid: &TorusGrid, src: &[f64], axis: usize, out: &mut [f64]) {
    diff_into(grid, src, axis, Step::Forward, out)
}

pub(crate) fn backward_diff_slice(grid: &TorusGrid, src: &[f64], axis: usize, out: &mut [f64]) {
    diff_into(grid, src, axis, Step::Backward, out)
}

/// Periodic shift of raw values: `out(x) = src(x + offset * e_axis)`.
pub(crate) fn shift_slice(grid: &TorusGrid, src: &[f64], axis: usize, offset: i64, out: &mut [f64]) {
    let m = grid.side();
    let inner = grid.stride(axis);
    let block = m * inner;
    for base in (0..grid.len()).step_by(block) {
        for i in 0..m {
            let here = base + i * inner;
            let there = base + ((i as i64 + offset).rem_euclid(m as i64) as usize) * inner;
            out[here..here + inner].copy_from_slice(&src[there..there + inner]);
        }
    }
}

/// `(D_k u)(x) = u(x + e_k) - u(x)`.
pub fn forward_diff(u: &ScalarField, axis: usize) -> Result<ScalarField> {
    u.grid.check_axis(axis)?;
    let mut out = vec![0.0; u.grid.len()];
    forward_diff_slice(&u.grid, &u.values, axis, &mut out);
    Ok(ScalarField::from_vec_unchecked(u.grid, out))
}

/// `(D_k^- u)(x) = u(x) - u(x - e_k)`, the negative adjoint of [`forward_diff`].
pub fn backward_diff(u: &ScalarField, axis: usize) -> Result<ScalarField> {
    u.grid.check_axis(axis)?;
    let mut out = vec![0.0; u.grid.len()];
    backward_diff_slice(&u.grid, &u.values, axis, &mut out);
    Ok(ScalarField::from_vec_unchecked(u.grid, out))
}

pub fn gradient(u: &ScalarField) -> VectorField {
    let g = u.grid;
    let comps = (0..g.dim())
        .map(|axis| {
            let mut out = vec![0.0; g.len()];
            forward_diff_slice(&g, &u.values, axis, &mut out);
            out
        })
        .collect();
    VectorField { grid: g, comps }
}

/// `(div F)(x) = sum_k F_k(x) - F_k(x - e_k)`.
pub fn adjoint_div(f: &VectorField) -> ScalarField {
    let g = f.grid;
    let mut out = vec![0.0; g.len()];
    let mut tmp = vec![0.0; g.len()];
    for (axis, comp) in f.comps.iter().enumerate() {
        backward_diff_slice(&g, comp, axis, &mut tmp);
        out.iter_mut().zip(&tmp).for_each(|(o, t)| *o += t);
    }
    ScalarField::from_vec_unchecked(g, out)
}

/// Composition of forward differences along `idx`; the order of the axes does
/// not matter since lattice shifts commute.
pub fn iterated_partial(u: &ScalarField, idx: &MultiIndex) -> Result<ScalarField> {
    idx.check(u.grid.dim())?;
    let mut cur = u.values.clone();
    let mut tmp = vec![0.0; cur.len()];
    for &axis in idx.axes() {
        forward_diff_slice(&u.grid, &cur, axis, &mut tmp);
        std::mem::swap(&mut cur, &mut tmp);
    }
    Ok(ScalarField::from_vec_unchecked(u.grid, cur))
}

/// Composition of backward differences along `idx`. Summation by parts gives
/// `sum g * D^+_I u = (-1)^|I| sum (D^-_I g) * u`.
pub fn iterated_backward(u: &ScalarField, idx: &MultiIndex) -> Result<ScalarField> {
    idx.check(u.grid.dim())?;
    let mut cur = u.values.clone();
    let mut tmp = vec![0.0; cur.len()];
    for &axis in idx.axes() {
        backward_diff_slice(&u.grid, &cur, axis, &mut tmp);
        std::mem::swap(&mut cur, &mut tmp);
    }
    Ok(ScalarField::from_vec_unchecked(u.grid, cur))
}

/// Multi-dimensional FFT on a fixed grid with cached plans and discrete symbols.
///
/// Forward transform is unnormalized, `u_hat(xi) = sum_x u(x) exp(-i xi.x)`;
/// the inverse carries the `1 / M^d` factor so a round trip is the identity.
#[derive(Clone)]
pub struct Spectral {
    grid: TorusGrid,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// `exp(i xi) - 1` per 1-D frequency index: symbol of the forward difference.
    forward_symbol: Vec<Complex64>,
    /// Symbol of the periodic Laplacian `div grad`, `-sum_k 4 sin^2(xi_k / 2)`.
    laplacian: Arc<Vec<f64>>,
}

impl fmt::Debug for Spectral {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Spectral").field("grid", &self.grid).finish()
    }
}

const GATHER_LINES: usize = 16;

impl Spectral {
    pub fn new(grid: TorusGrid) -> Self {
        let m = grid.side();
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(m);
        let inv = planner.plan_fft_inverse(m);
        let forward_symbol = (0..m)
            .map(|k| {
                let xi = Self::angle(m, k);
                Complex64::new(xi.cos() - 1.0, xi.sin())
            })
            .collect();
        let one_d: Vec<f64> = (0..m)
            .map(|k| {
                let s = (0.5 * Self::angle(m, k)).sin();
                4.0 * s * s
            })
            .collect();
        let laplacian = (0..grid.len())
            .map(|idx| {
                let c = grid.coords(idx);
                -(0..grid.dim()).map(|a| one_d[c[a]]).sum::<f64>()
            })
            .collect();
        Spectral { grid, fwd, inv, forward_symbol, laplacian: Arc::new(laplacian) }
    }

    pub fn grid(&self) -> TorusGrid {
        self.grid
    }

    /// Angular frequency `2 pi k / M`.
    pub fn angle(side: usize, k: usize) -> f64 {
        2.0 * std::f64::consts::PI * k as f64 / side as f64
    }

    pub fn forward_symbol(&self, k: usize) -> Complex64 {
        self.forward_symbol[k]
    }

    pub fn laplacian_symbol(&self) -> &[f64] {
        &self.laplacian
    }

    fn transform(&self, data: &mut [Complex64], plan: &Arc<dyn Fft<f64>>) {
        let g = self.grid;
        let m = g.side();
        assert_eq!(data.len(), g.len(), "spectral buffer does not match grid");
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        let mut lines = vec![Complex64::default(); m * GATHER_LINES];
        for axis in 0..g.dim() {
            let inner = g.stride(axis);
            if inner == 1 {
                plan.process_with_scratch(data, &mut scratch);
                continue;
            }
            let block = m * inner;
            for base in (0..g.len()).step_by(block) {
                for j0 in (0..inner).step_by(GATHER_LINES) {
                    let nb = GATHER_LINES.min(inner - j0);
                    for i in 0..m {
                        let row = base + i * inner + j0;
                        for c in 0..nb {
                            lines[c * m + i] = data[row + c];
                        }
                    }
                    plan.process_with_scratch(&mut lines[..nb * m], &mut scratch);
                    for i in 0..m {
                        let row = base + i * inner + j0;
                        for c in 0..nb {
                            data[row + c] = lines[c * m + i];
                        }
                    }
                }
            }
        }
    }

    pub fn forward_in_place(&self, data: &mut [Complex64]) {
        self.transform(data, &self.fwd);
    }

    pub fn inverse_in_place(&self, data: &mut [Complex64]) {
        self.transform(data, &self.inv);
        let s = 1.0 / self.grid.len() as f64;
        data.iter_mut().for_each(|z| *z *= s);
    }

    pub fn forward_real(&self, u: &[f64]) -> Vec<Complex64> {
        let mut data: Vec<Complex64> = u.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.forward_in_place(&mut data);
        data
    }

    /// Inverse transform keeping the real part.
    pub fn inverse_real(&self, mut data: Vec<Complex64>) -> Vec<f64> {
        self.inverse_in_place(&mut data);
        data.into_iter().map(|z| z.re).collect()
    }

    /// Product of the 1-D symbols `m_axis(xi)` at a spectral index.
    pub fn difference_symbol(&self, idx: usize, axis: usize) -> Complex64 {
        let m = self.grid.side();
        self.forward_symbol[idx / self.grid.stride(axis) % m]
    }

    /// Solves `div grad u = rhs` for mean-zero `u`; `rhs` must have zero sum.
    pub fn poisson_in_place(&self, data: &mut [Complex64]) {
        self.forward_in_place(data);
        data[0] = Complex64::default();
        for (z, &l) in data.iter_mut().zip(self.laplacian.iter()).skip(1) {
            *z /= l;
        }
        self.inverse_in_place(data);
    }

    /// Periodic convolution `(u * v)(x) = sum_y u(y) v(x - y)`.
    pub fn convolve(&self, u: &[f64], v: &[f64]) -> Vec<f64> {
        let mut a = self.forward_real(u);
        let b = self.forward_real(v);
        a.iter_mut().zip(&b).for_each(|(x, y)| *x *= y);
        self.inverse_real(a)
    }
}

/// Discrete Fourier transform of a scalar field (forward unnormalized, inverse
/// normalized by `1 / M^d`).
pub fn fourier_transform(u: &ScalarField, inverse: bool) -> Vec<Complex64> {
    let s = Spectral::new(u.grid);
    let mut data: Vec<Complex64> = u.values.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    if inverse {
        s.inverse_in_place(&mut data);
    } else {
        s.forward_in_place(&mut data);
    }
    data
}
