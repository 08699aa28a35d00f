//! Monte Carlo decay scans of `P = Cov(F[g], F[g'])` over radii and
//! separations.
//!
//! Every sample is used for every `(R, L)` pair. With shift averaging the
//! per-sample statistic is `(1/|T|) sum_z X_R(z) X'_R(z + L e)`, where
//! `X_R(z) = sum_x g_R(x - z) Xi_ij(x)` is evaluated for all translates `z`
//! at once by FFT; stationarity makes its expectation the same product
//! moment as for a single placement, at a fraction of the variance.

use std::time::Instant;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::commutator::{corrected_gradient, standard_commutator_entry};
use crate::correctors::HierarchyPair;
use crate::ensemble::{apply_map, lattice_density, EnsembleSpec, Sampler};
use crate::error::{Error, Result};
use crate::grid::{compensated_sum, shift_slice, MultiIndex, ScalarField, Spectral, TorusGrid};
use crate::lab::config::ExperimentConfig;
use crate::par::Execution;
use crate::sensitivity::{cov_bound_rhs, representation_derivative, TestFunction};
use crate::stats::{fit_power_law, product_covariance, CovarianceEstimate, Point, PowerFit};
use num_complex::Complex64;

/// Main-theorem envelope `R^{-d/2} (ln R)^{1/2} L^{-d/2 - alpha0} ln(L/R)`
/// for even `d`; without the `(ln R)^{1/2}` factor for odd `d`.
pub fn theorem_envelope(dim: usize, alpha0: f64, radius: f64, separation: f64) -> f64 {
    let half = dim as f64 / 2.0;
    let log_r = if dim.is_multiple_of(2) { radius.ln().max(0.0).sqrt() } else { 1.0 };
    radius.powf(-half) * log_r * separation.powf(-half - alpha0) * (separation / radius).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayPoint {
    pub radius: f64,
    pub separation: f64,
    pub estimate: CovarianceEstimate,
    pub envelope: f64,
    /// Right-hand side of the covariance estimate, when profiles were run.
    pub cov_rhs: Option<f64>,
}

impl DecayPoint {
    pub fn significant(&self) -> bool {
        self.estimate.sign_stable() && self.estimate.value.abs() > 2.0 * self.estimate.stderr
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeriesFit {
    /// Radius (L-fits) or ratio `L/R` (R-fits).
    pub key: f64,
    pub fit: Option<PowerFit>,
    /// Points with stable sign entering the fit.
    pub used: usize,
}

/// Single constant fitted on the significant points, and whether it
/// dominates every point up to three standard errors.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Domination {
    pub constant: f64,
    pub dominated: bool,
    pub worst_excess_in_stderr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageTimes {
    pub sampling_s: f64,
    pub profiles_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecayScanResult {
    pub dim: usize,
    pub order: usize,
    pub samples_used: usize,
    pub skipped: Vec<u64>,
    /// False when more than 1% of the samples failed.
    pub valid: bool,
    pub points: Vec<DecayPoint>,
    pub l_fits: Vec<SeriesFit>,
    pub r_fits: Vec<SeriesFit>,
    pub envelope_fit: Domination,
    /// Domination of `|P|` by `Lip^2 * cov_rhs`; constant is `max |P| / rhs`.
    pub cov_bound: Option<Domination>,
    /// Squared Lipschitz constant of the coefficient map.
    pub lipschitz_sq: f64,
    pub times: StageTimes,
}

impl DecayScanResult {
    pub fn point(&self, radius: f64, separation: f64) -> Option<&DecayPoint> {
        self.points.iter().find(|p| p.radius == radius && p.separation == separation)
    }

    pub fn l_fit(&self, radius: f64) -> Option<&PowerFit> {
        self.l_fits.iter().find(|f| f.key == radius).and_then(|f| f.fit.as_ref())
    }
}

/// Per-sample statistics for one `(R, L)` pair. `product` pairs the smoothed
/// commutators `X`, `X'` at separation `L`; the cross terms pair them with the
/// smoothed corrected gradients `Y_c`, `Y'_c`, which is what re-centering by
/// the ensemble mean of `abar` needs; the `linear_*` terms are the same
/// statistics for the smoothed Gaussian field.
#[derive(Debug, Clone)]
struct PairStat {
    product: f64,
    x: f64,
    y: f64,
    /// `<Y_c X'>` for each `c`.
    first_cross: Vec<f64>,
    /// `<X Y'_c>` for each `c`.
    second_cross: Vec<f64>,
    /// `<Y_c Y'_c'>` at `c * d + c'`.
    both_cross: Vec<f64>,
    /// Levels of `Y_c` and `Y'_c`.
    first_levels: Vec<f64>,
    second_levels: Vec<f64>,
    linear_product: f64,
    linear_x: f64,
    linear_y: f64,
}

struct SampleStats {
    /// Rows `j` and `l` of this sample's `abar^1`.
    first_row: Vec<f64>,
    second_row: Vec<f64>,
    pairs: Vec<PairStat>,
}

/// How the first-order effective coefficient in the commutator is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Centering {
    /// Mean of the per-sample `abar^1` over the whole run.
    #[default]
    Ensemble,
    /// Each sample's own `abar^1`; `Xi^{o,1}` then has zero torus mean.
    Sample,
}

struct ScanGeometry {
    grid: TorusGrid,
    radii: Vec<f64>,
    separations: Vec<usize>,
    axis: usize,
    sign: i64,
    /// Spectra of the test functions centred at the origin, one per radius.
    kernels: Vec<Vec<Complex64>>,
    shift_average: bool,
    centering: Centering,
    control: bool,
}

impl ScanGeometry {
    /// Index of `idx + offset e_axis`.
    fn shifted_index(&self, idx: usize, offset: i64) -> usize {
        let c = self.grid.coords(idx);
        let mut coords = [0i64; 3];
        for k in 0..self.grid.dim() {
            coords[k] = c[k] as i64;
        }
        coords[self.axis] += offset;
        self.grid.index(&coords[..self.grid.dim()])
    }

    fn center(&self) -> usize {
        let half = self.grid.side() as i64 / 2;
        self.grid.index(&vec![half; self.grid.dim()])
    }
}

/// Pairs `u` with `v` translated by `offset`: the translation average of
/// `u(z) v(z + offset e)` or its value at the centre, with the matching levels
/// of `u` and of the translated `v`.
struct Pairing<'a> {
    geom: &'a ScanGeometry,
    offset: i64,
    scratch: Vec<f64>,
}

impl Pairing<'_> {
    fn level_first(&self, u: &[f64]) -> f64 {
        if self.geom.shift_average {
            u.iter().sum::<f64>() / u.len() as f64
        } else {
            u[self.geom.center()]
        }
    }

    fn level_second(&self, v: &[f64]) -> f64 {
        if self.geom.shift_average {
            v.iter().sum::<f64>() / v.len() as f64
        } else {
            v[self.geom.shifted_index(self.geom.center(), self.offset)]
        }
    }

    fn product(&mut self, u: &[f64], v: &[f64]) -> f64 {
        if self.geom.shift_average {
            shift_slice(&self.geom.grid, v, self.geom.axis, self.offset, &mut self.scratch);
            u.iter().zip(&self.scratch).map(|(a, b)| a * b).sum::<f64>() / u.len() as f64
        } else {
            self.level_first(u) * self.level_second(v)
        }
    }
}

fn sample_statistics(
    sampler: &Sampler,
    geom: &ScanGeometry,
    index: u64,
    order: usize,
    comps: [usize; 4],
    settings: crate::elliptic::SolverSettings,
) -> Result<SampleStats> {
    let [i, j, m, l] = comps;
    let spectral = sampler.spectral();
    let d = geom.grid.dim();
    let gaussian = sampler.gaussian(index);
    let a = apply_map(&sampler.spec().map, &gaussian);
    let pair = HierarchyPair::build(&a, spectral, order, settings, Execution::Sequential)?;
    let abar = pair.primal().abar(&MultiIndex::empty())?;
    let same = (m, l) == (i, j);
    let xi_hat = spectral.forward_real(standard_commutator_entry(&pair, order, i, j)?.values());
    let xi2_hat = if same {
        None
    } else {
        Some(spectral.forward_real(standard_commutator_entry(&pair, order, m, l)?.values()))
    };
    let gradients_hat = |comp: usize| -> Result<Vec<Vec<Complex64>>> {
        if geom.centering == Centering::Sample {
            return Ok(Vec::new());
        }
        let g = corrected_gradient(pair.primal(), comp)?;
        Ok(g.components().iter().map(|c| spectral.forward_real(c)).collect())
    };
    let first_grad = gradients_hat(i)?;
    let second_grad = if m == i { None } else { Some(gradients_hat(m)?) };
    let gaussian_hat = if geom.control { Some(spectral.forward_real(gaussian.values())) } else { None };

    let mut pairs = Vec::with_capacity(geom.radii.len() * geom.separations.len());
    for kernel in &geom.kernels {
        let smooth = |field: &[Complex64]| -> Vec<f64> {
            let prod: Vec<Complex64> = field.iter().zip(kernel).map(|(a, b)| a * b).collect();
            spectral.inverse_real(prod)
        };
        let x = smooth(&xi_hat);
        let y = xi2_hat.as_ref().map(|h| smooth(h)).unwrap_or_else(|| x.clone());
        let first: Vec<Vec<f64>> = first_grad.iter().map(|h| smooth(h)).collect();
        let second: Vec<Vec<f64>> = match &second_grad {
            None => first.clone(),
            Some(hs) => hs.iter().map(|h| smooth(h)).collect(),
        };
        let linear = gaussian_hat.as_ref().map(|h| smooth(h));
        for &sep in &geom.separations {
            let mut p = Pairing { geom, offset: geom.sign * sep as i64, scratch: vec![0.0; x.len()] };
            let product = p.product(&x, &y);
            let first_cross = first.iter().map(|u| p.product(u, &y)).collect();
            let second_cross = second.iter().map(|v| p.product(&x, v)).collect();
            let mut both_cross = Vec::with_capacity(first.len() * second.len());
            for u in &first {
                for v in &second {
                    both_cross.push(p.product(u, v));
                }
            }
            let (linear_product, linear_x, linear_y) = match &linear {
                None => (0.0, 0.0, 0.0),
                Some(z) => (p.product(z, z), p.level_first(z), p.level_second(z)),
            };
            pairs.push(PairStat {
                product,
                x: p.level_first(&x),
                y: p.level_second(&y),
                first_cross,
                second_cross,
                both_cross,
                first_levels: first.iter().map(|u| p.level_first(u)).collect(),
                second_levels: second.iter().map(|v| p.level_second(v)).collect(),
                linear_product,
                linear_x,
                linear_y,
            });
        }
    }
    Ok(SampleStats {
        first_row: abar[j * d..(j + 1) * d].to_vec(),
        second_row: abar[l * d..(l + 1) * d].to_vec(),
        pairs,
    })
}

/// Product statistic and levels of one sample after replacing its own
/// `abar^1` rows by the ensemble rows: `X -> X + sum_c delta_c Y_c`.
fn recentred(s: &PairStat, first_delta: &[f64], second_delta: &[f64]) -> (f64, f64, f64) {
    if s.first_levels.is_empty() {
        return (s.product, s.x, s.y);
    }
    let d = first_delta.len();
    let dot = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    let mut product = s.product + dot(first_delta, &s.first_cross) + dot(second_delta, &s.second_cross);
    for c in 0..d {
        for c2 in 0..d {
            product += first_delta[c] * second_delta[c2] * s.both_cross[c * d + c2];
        }
    }
    let x = s.x + dot(first_delta, &s.first_levels);
    let y = s.y + dot(second_delta, &s.second_levels);
    (product, x, y)
}

/// Exact covariance of the smoothed Gaussian field at separation `offset e`.
fn linear_covariance(geom: &ScanGeometry, spectral: &Spectral, density: &[f64], kernel: &[Complex64], offset: i64) -> f64 {
    let spectrum: Vec<Complex64> =
        density.iter().zip(kernel).map(|(s, k)| Complex64::new(s * k.norm_sqr(), 0.0)).collect();
    let cov = spectral.inverse_real(spectrum);
    cov[geom.shifted_index(0, offset)]
}

/// Pointwise `<|dF/da|^2>^(1/2)` for a test function at the torus centre,
/// estimated from the first `samples` coefficient samples.
pub fn derivative_profile(
    spec: &EnsembleSpec,
    radius: f64,
    i: usize,
    j: usize,
    order: usize,
    samples: usize,
    settings: crate::elliptic::SolverSettings,
    exec: Execution,
) -> Result<Vec<f64>> {
    let sampler = Sampler::new(*spec);
    let g = TestFunction::centered(spec.grid, radius)?;
    let per_sample = exec.try_map(samples, |s| {
        let a = sampler.coefficients(s as u64);
        let pair = HierarchyPair::build(&a, sampler.spectral(), order, settings, Execution::Sequential)?;
        let d = representation_derivative(&pair, sampler.spectral(), &g, i, j, order, settings)?;
        Ok::<_, Error>(d.norm_sq())
    })?;
    let n = spec.grid.len();
    let mut acc = vec![0.0; n];
    for v in &per_sample {
        acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
    }
    Ok(acc.into_iter().map(|v| (v / samples as f64).sqrt()).collect())
}

/// Fits one constant on the significant points (`|P| <= C w`) and checks
/// that it dominates every point within three standard errors.
pub fn fit_domination(points: &[(f64, f64, f64)], significant: &[bool]) -> Domination {
    let constant = points
        .iter()
        .zip(significant)
        .filter(|(_, s)| **s)
        .map(|((p, _, w), _)| p.abs() / w)
        .fold(0.0, f64::max);
    check_domination(points, constant)
}

/// Checks `|P| <= C w + 3 stderr` at every point.
pub fn check_domination(points: &[(f64, f64, f64)], constant: f64) -> Domination {
    let mut worst = f64::NEG_INFINITY;
    for &(p, se, w) in points {
        let excess = p.abs() - constant * w;
        let in_se = if se > 0.0 { excess / se } else if excess > 0.0 { f64::INFINITY } else { 0.0 };
        worst = worst.max(in_se);
    }
    Domination { constant, dominated: worst <= 3.0, worst_excess_in_stderr: worst }
}

fn series_fits<K: Fn(&DecayPoint) -> f64, X: Fn(&DecayPoint) -> f64>(
    points: &[DecayPoint],
    key: K,
    x: X,
) -> Vec<SeriesFit> {
    let mut keys: Vec<f64> = points.iter().map(&key).collect();
    keys.sort_by(|a, b| a.partial_cmp(b).expect("finite keys"));
    keys.dedup();
    keys.into_iter()
        .map(|k| {
            let pts: Vec<Point> = points
                .iter()
                .filter(|p| key(p) == k && p.estimate.sign_stable())
                .map(|p| Point::new(x(p), p.estimate.value.abs(), p.estimate.stderr))
                .collect();
            let used = pts.len();
            let fit = if used >= 3 { fit_power_law(&pts).ok() } else { None };
            SeriesFit { key: k, fit, used }
        })
        .collect()
}

/// Runs the full scan described by `cfg`.
pub fn run_decay_scan(cfg: &ExperimentConfig, exec: Execution) -> Result<DecayScanResult> {
    cfg.validate_scan()?;
    let spec = cfg.ensemble_spec()?;
    let settings = cfg.solver()?;
    let order = cfg.order();
    let comps = cfg.components();
    let (axis, sign) = cfg.direction()?;
    let grid = spec.grid;
    if !spec.covariance.within_theory(grid.dim()) {
        warn!("alpha0 = {} lies outside the theorem range (0, d/2]", spec.covariance.alpha0);
    }
    let sampler = Sampler::new(spec);
    let spectral: &Spectral = sampler.spectral();
    let origin = vec![0usize; grid.dim()];
    let kernels = cfg
        .scan
        .radii
        .iter()
        .map(|&r| Ok(spectral.forward_real(TestFunction::new(grid, r, &origin)?.values().values())))
        .collect::<Result<Vec<_>>>()?;
    let geom = ScanGeometry {
        grid,
        radii: cfg.scan.radii.clone(),
        separations: cfg.scan.separations.iter().map(|&l| l as usize).collect(),
        axis,
        sign,
        kernels,
        shift_average: cfg.scan.shift_average,
        centering: cfg.scan.centering,
        control: cfg.scan.control_variate,
    };

    let started = Instant::now();
    let samples = cfg.scan.samples;
    let results = exec.map(samples, |s| sample_statistics(&sampler, &geom, s as u64, order, comps, settings));
    let mut skipped = Vec::new();
    let mut stats: Vec<SampleStats> = Vec::with_capacity(samples);
    for (s, r) in results.into_iter().enumerate() {
        match r {
            Ok(v) => stats.push(v),
            Err(e) => {
                warn!("sample {s} skipped: {e}");
                skipped.push(s as u64);
            }
        }
    }
    let sampling_s = started.elapsed().as_secs_f64();
    let valid = (skipped.len() as f64) <= 0.01 * samples as f64;
    if !valid {
        warn!("{} of {samples} samples failed; run marked invalid", skipped.len());
    }
    info!("sampling stage: {} samples in {sampling_s:.1}s", stats.len());

    let started = Instant::now();
    let lipschitz = spec.map.lipschitz(grid.dim());
    let profiles = if cfg.scan.profile_samples > 0 {
        let [i, j, m, l] = comps;
        let mut out = Vec::new();
        for &r in &cfg.scan.radii {
            let first = derivative_profile(&spec, r, i, j, order, cfg.scan.profile_samples, settings, exec)?;
            let second = if (m, l) == (i, j) {
                first.clone()
            } else {
                derivative_profile(&spec, r, m, l, order, cfg.scan.profile_samples, settings, exec)?
            };
            out.push((first, second));
        }
        Some(out)
    } else {
        None
    };
    let profiles_s = started.elapsed().as_secs_f64();
    let kernel = spec.covariance.kernel(spectral);

    let batches = cfg.scan.batches;
    let d = grid.dim();
    let ensemble_row = |row: fn(&SampleStats) -> &Vec<f64>| -> Vec<f64> {
        (0..d).map(|c| compensated_sum(stats.iter().map(|s| row(s)[c])) / stats.len().max(1) as f64).collect()
    };
    let first_mean = ensemble_row(|s| &s.first_row);
    let second_mean = ensemble_row(|s| &s.second_row);
    let derivative = spec.map.derivative_at_zero(d);
    let [i, j, m, l] = comps;
    let linear_weight = derivative[j * d + i] * derivative[l * d + m];
    let density = lattice_density(&spec.covariance, spectral);
    let mut points = Vec::new();
    let n_sep = geom.separations.len();
    for (ri, &radius) in geom.radii.iter().enumerate() {
        for (li, &sep) in geom.separations.iter().enumerate() {
            let k = ri * n_sep + li;
            let mut products = Vec::with_capacity(stats.len());
            let mut xs = Vec::with_capacity(stats.len());
            let mut ys = Vec::with_capacity(stats.len());
            for s in &stats {
                let first_delta: Vec<f64> = s.first_row.iter().zip(&first_mean).map(|(a, b)| a - b).collect();
                let second_delta: Vec<f64> = s.second_row.iter().zip(&second_mean).map(|(a, b)| a - b).collect();
                let (p, x, y) = recentred(&s.pairs[k], &first_delta, &second_delta);
                products.push(p);
                xs.push(x);
                ys.push(y);
            }
            let mut estimate = product_covariance(&products, &xs, &ys, batches)?;
            if geom.control {
                let lin = |f: fn(&PairStat) -> f64| -> Vec<f64> { stats.iter().map(|s| f(&s.pairs[k])).collect() };
                let reference = product_covariance(
                    &lin(|p| p.linear_product),
                    &lin(|p| p.linear_x),
                    &lin(|p| p.linear_y),
                    batches,
                )?;
                let exact = linear_covariance(&geom, spectral, &density, &geom.kernels[ri], sign * sep as i64);
                let scaled = CovarianceEstimate {
                    value: linear_weight * reference.value,
                    stderr: linear_weight.abs() * reference.stderr,
                    n_samples: reference.n_samples,
                    batch_values: reference.batch_values.iter().map(|v| linear_weight * v).collect(),
                };
                estimate = estimate.with_control(&scaled, linear_weight * exact)?;
            }
            let separation = sep as f64;
            let envelope = theorem_envelope(grid.dim(), spec.covariance.alpha0, radius, separation);
            let cov_rhs = match &profiles {
                None => None,
                Some(p) => {
                    let (first, second) = &p[ri];
                    // Profile of the second functional: translate by L e.
                    let mut shift = vec![0i64; grid.dim()];
                    shift[axis] = sign * sep as i64;
                    let moved = ScalarField::from_vec(grid, second.clone())?.translated(&shift);
                    Some(cov_bound_rhs(spectral, first, moved.values(), &kernel)?)
                }
            };
            points.push(DecayPoint { radius, separation, estimate, envelope, cov_rhs });
        }
    }

    let l_fits = series_fits(&points, |p| p.radius, |p| p.separation);
    let r_fits = series_fits(&points, |p| p.separation / p.radius, |p| p.radius);
    let triples: Vec<(f64, f64, f64)> =
        points.iter().map(|p| (p.estimate.value, p.estimate.stderr, p.envelope)).collect();
    let significant: Vec<bool> = points.iter().map(DecayPoint::significant).collect();
    let envelope_fit = fit_domination(&triples, &significant);
    let lipschitz_sq = lipschitz * lipschitz;
    let cov_bound = profiles.as_ref().map(|_| {
        let triples: Vec<(f64, f64, f64)> = points
            .iter()
            .map(|p| (p.estimate.value, p.estimate.stderr, p.cov_rhs.unwrap_or(0.0)))
            .collect();
        let mut d = check_domination(&triples, lipschitz_sq);
        // Report the tightest constant alongside the a priori one.
        d.constant = points
            .iter()
            .filter(|p| p.cov_rhs.unwrap_or(0.0) > 0.0)
            .map(|p| p.estimate.value.abs() / p.cov_rhs.unwrap_or(1.0))
            .fold(0.0, f64::max);
        d
    });
    Ok(DecayScanResult {
        dim: grid.dim(),
        order,
        samples_used: stats.len(),
        skipped,
        valid,
        points,
        l_fits,
        r_fits,
        envelope_fit,
        cov_bound,
        lipschitz_sq,
        times: StageTimes { sampling_s, profiles_s },
    })
}
