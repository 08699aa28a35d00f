//! Stationary Gaussian ensemble on the torus and its push-forward to
//! coefficient fields.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{MatrixField, ScalarField, Spectral, TorusGrid};
use crate::stats::{fit_power_law, Point, PowerFit};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CovarianceFamily {
    /// `S(k) = amp * exp(-(length |k|)^alpha0)`: covariance tail `|x|^(-d-alpha0)`.
    #[default]
    StableSpectral,
    /// `S(k) = amp * (1 + (length |k|)^2)^(-(d/2 + alpha0))`: exponential tail.
    MaternLike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralCovariance {
    pub family: CovarianceFamily,
    pub alpha0: f64,
    pub length: f64,
    pub amplitude: f64,
}

impl SpectralCovariance {
    pub fn new(family: CovarianceFamily, alpha0: f64, length: f64, amplitude: f64) -> Result<Self> {
        if !(alpha0 > 0.0 && alpha0 <= 2.0) {
            return Err(Error::param(format!("alpha0 must lie in (0, 2], got {alpha0}")));
        }
        if !(length >= 0.0 && length.is_finite()) {
            return Err(Error::param(format!("length must be finite and >= 0, got {length}")));
        }
        if !(amplitude >= 0.0 && amplitude.is_finite()) {
            return Err(Error::param(format!("amplitude must be finite and >= 0, got {amplitude}")));
        }
        Ok(SpectralCovariance { family, alpha0, length, amplitude })
    }

    /// Default stable-spectral family.
    pub fn stable(alpha0: f64, length: f64, amplitude: f64) -> Result<Self> {
        Self::new(CovarianceFamily::StableSpectral, alpha0, length, amplitude)
    }

    /// Whether `alpha0` lies in the range `(0, d/2]` covered by the decay theory.
    pub fn within_theory(&self, dim: usize) -> bool {
        self.alpha0 <= dim as f64 / 2.0
    }

    fn density_of_norm_sq(&self, dim: usize, k2: f64) -> f64 {
        let l2 = self.length * self.length * k2;
        match self.family {
            CovarianceFamily::StableSpectral => {
                self.amplitude * (-l2.sqrt().powf(self.alpha0)).exp()
            }
            CovarianceFamily::MaternLike => {
                self.amplitude * (1.0 + l2).powf(-(dim as f64 / 2.0 + self.alpha0))
            }
        }
    }

    /// Lattice covariance kernel `c(x) = M^-d sum_xi S(xi) exp(i xi.x)`.
    pub fn kernel(&self, spectral: &Spectral) -> ScalarField {
        let grid = spectral.grid();
        let s = lattice_density(self, spectral);
        let data = s.into_iter().map(|v| Complex64::new(v, 0.0)).collect();
        ScalarField::from_vec_unchecked(grid, spectral.inverse_real(data))
    }
}

/// Spectral density at a wave vector `k`.
pub fn spectral_density(cov: &SpectralCovariance, k: &[f64]) -> f64 {
    let k2: f64 = k.iter().map(|v| v * v).sum();
    cov.density_of_norm_sq(k.len(), k2)
}

/// Density on the lattice frequencies, evaluated at the lattice wave vector
/// `k_j = 2 sin(xi_j / 2)` so that it is smooth and periodic away from the
/// origin.
pub fn lattice_density(cov: &SpectralCovariance, spectral: &Spectral) -> Vec<f64> {
    let dim = spectral.grid().dim();
    spectral
        .laplacian_symbol()
        .iter()
        .map(|&lap| cov.density_of_norm_sq(dim, -lap))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapKind {
    /// `A(g) = s(g) Id`.
    #[default]
    ScalarLogistic,
    /// `A(g) = s(g) Id + b(g) K` with a fixed unit skew matrix `K`.
    SkewLogistic,
}

/// Pointwise map `g -> A(g)` with symmetric part in `[lambda, 1]` and
/// `xi . A^-1 xi >= |xi|^2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoefficientMap {
    pub lambda: f64,
    pub kind: MapKind,
    /// Slope `kappa` of the logistic ramp.
    pub steepness: f64,
    /// Relative size of the skew part, in `[0, 1]`.
    pub skew: f64,
}

impl CoefficientMap {
    pub fn new(lambda: f64, kind: MapKind, steepness: f64, skew: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda < 1.0) {
            return Err(Error::param(format!("lambda must lie in (0, 1), got {lambda}")));
        }
        if !(steepness > 0.0 && steepness.is_finite()) {
            return Err(Error::param(format!("steepness must be positive, got {steepness}")));
        }
        if !(0.0..=1.0).contains(&skew) {
            return Err(Error::param(format!("skew must lie in [0, 1], got {skew}")));
        }
        Ok(CoefficientMap { lambda, kind, steepness, skew })
    }

    pub fn scalar(lambda: f64, steepness: f64) -> Result<Self> {
        Self::new(lambda, MapKind::ScalarLogistic, steepness, 0.0)
    }

    fn logistic(&self, g: f64) -> f64 {
        1.0 / (1.0 + (-self.steepness * g).exp())
    }

    /// Isotropic part `s(g) = lambda + (1 - lambda) / (1 + exp(-kappa g))`.
    pub fn scale(&self, g: f64) -> f64 {
        // Written as a ratio so that s(0) = (1 + lambda) / 2 is correctly rounded.
        let x = self.steepness * g;
        if x >= 0.0 {
            let t = (-x).exp();
            (1.0 + self.lambda * t) / (1.0 + t)
        } else {
            let t = x.exp();
            (t + self.lambda) / (t + 1.0)
        }
    }

    /// Skew amplitude `b(g)`, zero for the scalar map.
    pub fn skew_amplitude(&self, g: f64) -> f64 {
        match self.kind {
            MapKind::ScalarLogistic => 0.0,
            MapKind::SkewLogistic => {
                let s = self.scale(g);
                self.skew * (s * (1.0 - s)).max(0.0).sqrt() * g.tanh()
            }
        }
    }

    /// `A(g)` as a row-major `d x d` matrix.
    pub fn matrix(&self, dim: usize, g: f64) -> Vec<f64> {
        let s = self.scale(g);
        let b = self.skew_amplitude(g);
        let k = unit_skew(dim);
        let mut m = k.iter().map(|v| b * v).collect::<Vec<_>>();
        for r in 0..dim {
            m[r * dim + r] += s;
        }
        m
    }

    /// `A'(0)` as a row-major `d x d` matrix: the linear response of the
    /// coefficients to the Gaussian field.
    pub fn derivative_at_zero(&self, dim: usize) -> Vec<f64> {
        let ds = (1.0 - self.lambda) * self.steepness / 4.0;
        let db = match self.kind {
            MapKind::ScalarLogistic => 0.0,
            // b(g) = skew sqrt(s(1 - s)) tanh(g) with tanh'(0) = 1.
            MapKind::SkewLogistic => {
                let s = self.scale(0.0);
                self.skew * (s * (1.0 - s)).sqrt()
            }
        };
        let mut m: Vec<f64> = unit_skew(dim).iter().map(|v| db * v).collect();
        for r in 0..dim {
            m[r * dim + r] += ds;
        }
        m
    }

    fn frobenius_derivative(&self, dim: usize, g: f64) -> f64 {
        let p = self.logistic(g);
        let ds = (1.0 - self.lambda) * self.steepness * p * (1.0 - p);
        let db = match self.kind {
            MapKind::ScalarLogistic => 0.0,
            MapKind::SkewLogistic => {
                let s = self.scale(g);
                let root = (s * (1.0 - s)).max(0.0).sqrt();
                let droot = if root > 0.0 { (1.0 - 2.0 * s) * ds / (2.0 * root) } else { 0.0 };
                let t = g.tanh();
                self.skew * (droot * t + root * (1.0 - t * t))
            }
        };
        (dim as f64 * ds * ds + 2.0 * db * db).sqrt()
    }

    /// Lipschitz constant of `A` in the Frobenius norm.
    pub fn lipschitz(&self, dim: usize) -> f64 {
        match self.kind {
            MapKind::ScalarLogistic => {
                (dim as f64).sqrt() * (1.0 - self.lambda) * self.steepness / 4.0
            }
            MapKind::SkewLogistic => {
                // Supremum of |A'| by a dense scan; A' decays exponentially
                // beyond |kappa g| = 40.
                let reach = 40.0 / self.steepness.min(1.0);
                let n = 200_000;
                let max = (0..=n)
                    .map(|k| -reach + 2.0 * reach * k as f64 / n as f64)
                    .map(|g| self.frobenius_derivative(dim, g))
                    .fold(0.0, f64::max);
                1.01 * max
            }
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.kind == MapKind::ScalarLogistic || self.skew == 0.0
    }
}

/// Unit skew matrix: rotation generator in 2-D, cross product with
/// `(1,1,1)/sqrt(3)` in 3-D. Frobenius norm `sqrt(2)`.
fn unit_skew(dim: usize) -> Vec<f64> {
    match dim {
        2 => vec![0.0, -1.0, 1.0, 0.0],
        _ => {
            let w = 1.0 / 3f64.sqrt();
            vec![0.0, -w, w, w, 0.0, -w, -w, w, 0.0]
        }
    }
}

/// `a(x) = A(G(x))`.
pub fn apply_map(map: &CoefficientMap, field: &ScalarField) -> MatrixField {
    let grid = field.grid();
    let d = grid.dim();
    let s: Vec<f64> = field.values().iter().map(|&g| map.scale(g)).collect();
    let mut a = MatrixField::isotropic(&ScalarField::from_vec_unchecked(grid, s));
    if !map.is_symmetric() {
        let k = unit_skew(d);
        let b: Vec<f64> = field.values().iter().map(|&g| map.skew_amplitude(g)).collect();
        for r in 0..d {
            for c in 0..d {
                let w = k[r * d + c];
                if w != 0.0 {
                    a.entry_mut(r, c).iter_mut().zip(&b).for_each(|(e, b)| *e += w * b);
                }
            }
        }
    }
    a
}

/// Pointwise transpose.
pub fn transpose_field(a: &MatrixField) -> MatrixField {
    a.transpose()
}

/// Full specification of the sampling law on a fixed grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub covariance: SpectralCovariance,
    pub map: CoefficientMap,
    pub grid: TorusGrid,
    pub seed: u64,
}

/// Reusable sampler holding the FFT plans and the square-root spectrum.
#[derive(Debug, Clone)]
pub struct Sampler {
    spec: EnsembleSpec,
    spectral: Spectral,
    root_density: Vec<f64>,
}

impl Sampler {
    pub fn new(spec: EnsembleSpec) -> Self {
        let spectral = Spectral::new(spec.grid);
        let root_density =
            lattice_density(&spec.covariance, &spectral).into_iter().map(f64::sqrt).collect();
        Sampler { spec, spectral, root_density }
    }

    pub fn spec(&self) -> &EnsembleSpec {
        &self.spec
    }

    pub fn spectral(&self) -> &Spectral {
        &self.spectral
    }

    /// Gaussian field for one sample index. White noise from a ChaCha stream
    /// keyed by `(seed, index)` is filtered by `sqrt(S)` in Fourier space, so
    /// the torus covariance is exactly the inverse transform of `S`.
    pub fn gaussian(&self, index: u64) -> ScalarField {
        let grid = self.spec.grid;
        if self.spec.covariance.amplitude == 0.0 {
            return ScalarField::zeros(grid);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.spec.seed);
        rng.set_stream(index);
        let mut data: Vec<Complex64> = (0..grid.len())
            .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
            .collect();
        self.spectral.forward_in_place(&mut data);
        data.iter_mut().zip(&self.root_density).for_each(|(z, r)| *z *= r);
        ScalarField::from_vec_unchecked(grid, self.spectral.inverse_real(data))
    }

    pub fn coefficients(&self, index: u64) -> MatrixField {
        apply_map(&self.spec.map, &self.gaussian(index))
    }
}

pub fn sample_gaussian_field(spec: &EnsembleSpec, index: u64) -> ScalarField {
    Sampler::new(*spec).gaussian(index)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TailFit {
    pub fit: PowerFit,
    /// `(lag, |c(lag)|)` pairs used in the fit.
    pub points: Vec<(f64, f64)>,
}

/// Log-log slope of `|c|` along the first axis over lags in `[length, M/4]`.
pub fn covariance_tail_check(spec: &EnsembleSpec) -> Result<TailFit> {
    let grid = spec.grid;
    let spectral = Spectral::new(grid);
    let c = spec.covariance.kernel(&spectral);
    let c0 = c.values()[0];
    if !(c0 > 0.0) {
        return Err(Error::Diagnostic("degenerate covariance: c(0) = 0".into()));
    }
    let lo = spec.covariance.length.ceil().max(2.0) as usize;
    let hi = grid.side() / 4;
    let stride = grid.stride(0);
    let mut points = Vec::new();
    let mut lag = lo;
    while lag <= hi {
        let v = c.values()[lag * stride].abs();
        // Below this level the kernel is FFT round-off.
        if v > 1e-12 * c0 {
            points.push((lag as f64, v));
        }
        lag = ((lag as f64 * 1.25).ceil() as usize).max(lag + 1);
    }
    let fit = fit_power_law(
        &points.iter().map(|&(x, y)| Point::exact(x, y)).collect::<Vec<_>>(),
    )
    .map_err(|e| Error::Diagnostic(format!("covariance tail fit failed: {e}")))?;
    if fit.slope >= 0.0 {
        return Err(Error::Diagnostic(format!(
            "covariance does not decay: fitted slope {:.3}",
            fit.slope
        )));
    }
    Ok(TailFit { fit, points })
}
