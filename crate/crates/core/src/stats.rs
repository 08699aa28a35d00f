//! Small statistics toolkit: log-log regression, batch means, moments.

use log::warn;
use serde::Serialize;

use crate::error::{Error, Result};

/// Observation `y ± sigma` at abscissa `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub sigma: f64,
}

impl Point {
    pub fn new(x: f64, y: f64, sigma: f64) -> Self {
        Point { x, y, sigma }
    }

    pub fn exact(x: f64, y: f64) -> Self {
        Point { x, y, sigma: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PowerFit {
    pub slope: f64,
    pub intercept: f64,
    /// Weighted root-mean-square residual in log space.
    pub residual: f64,
    /// Standard error of the slope from the weighted normal equations.
    pub slope_stderr: f64,
    /// Coefficient of determination of the log-log fit.
    pub r_squared: f64,
    pub points_used: usize,
}

/// Weighted least squares of `ln y = slope ln x + intercept`.
///
/// Weights are `1 / (sigma / y)^2`; points with zero `sigma` share weight one
/// (and, when every point is exact, the fit is ordinary least squares).
/// Points with nonpositive `x` or `y` are dropped with a warning.
pub fn fit_power_law(points: &[Point]) -> Result<PowerFit> {
    let kept: Vec<&Point> = points
        .iter()
        .filter(|p| {
            let ok = p.x > 0.0 && p.y > 0.0 && p.x.is_finite() && p.y.is_finite();
            if !ok {
                warn!("dropping point ({}, {}) from power-law fit", p.x, p.y);
            }
            ok
        })
        .collect();
    if kept.len() < 3 {
        return Err(Error::param(format!(
            "power-law fit needs at least 3 positive points, got {}",
            kept.len()
        )));
    }
    let all_weighted = kept.iter().all(|p| p.sigma > 0.0);
    let xs: Vec<f64> = kept.iter().map(|p| p.x.ln()).collect();
    let ys: Vec<f64> = kept.iter().map(|p| p.y.ln()).collect();
    let ws: Vec<f64> = kept
        .iter()
        .map(|p| {
            if all_weighted {
                let rel = p.sigma / p.y;
                1.0 / (rel * rel)
            } else {
                1.0
            }
        })
        .collect();
    let line = weighted_line(&xs, &ys, &ws)?;
    Ok(PowerFit {
        slope: line.slope,
        intercept: line.intercept,
        residual: line.residual,
        slope_stderr: line.slope_stderr,
        r_squared: line.r_squared,
        points_used: kept.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub residual: f64,
    pub slope_stderr: f64,
    pub r_squared: f64,
}

/// Weighted linear regression `y = slope x + intercept`.
pub fn weighted_line(xs: &[f64], ys: &[f64], ws: &[f64]) -> Result<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n || ws.len() != n {
        return Err(Error::param("line fit needs at least 2 matching points"));
    }
    let sw: f64 = ws.iter().sum();
    let mx = xs.iter().zip(ws).map(|(x, w)| w * x).sum::<f64>() / sw;
    let my = ys.iter().zip(ws).map(|(y, w)| w * y).sum::<f64>() / sw;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    let mut syy = 0.0;
    for k in 0..n {
        let dx = xs[k] - mx;
        let dy = ys[k] - my;
        sxx += ws[k] * dx * dx;
        sxy += ws[k] * dx * dy;
        syy += ws[k] * dy * dy;
    }
    if sxx <= 0.0 {
        return Err(Error::param("line fit needs at least two distinct abscissae"));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = (0..n)
        .map(|k| {
            let r = ys[k] - slope * xs[k] - intercept;
            ws[k] * r * r
        })
        .sum();
    let residual = (ssr / sw).sqrt();
    let dof = (n as f64 - 2.0).max(1.0);
    let slope_stderr = (ssr / dof / sxx).sqrt();
    let r_squared = if syy > 0.0 { 1.0 - ssr / syy } else { 1.0 };
    Ok(LineFit { slope, intercept, residual, slope_stderr, r_squared })
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased sample variance.
pub fn variance(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(values);
    values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64
}

/// Standard error of the mean.
pub fn stderr_of_mean(values: &[f64]) -> f64 {
    (variance(values) / values.len() as f64).sqrt()
}

pub const DEFAULT_BATCHES: usize = 8;

/// Sample covariance with batch-means standard error.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CovarianceEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_samples: usize,
    /// Covariance within each batch.
    pub batch_values: Vec<f64>,
}

impl CovarianceEstimate {
    /// True when every batch has the sign of the pooled estimate.
    pub fn sign_stable(&self) -> bool {
        self.value != 0.0
            && self.batch_values.iter().all(|b| b.signum() == self.value.signum() && *b != 0.0)
    }

    /// Control-variate estimate `self - reference + exact`, where `reference`
    /// estimates a covariance known to equal `exact` from the same samples and
    /// batches. The error is the batch spread of the difference.
    pub fn with_control(&self, reference: &CovarianceEstimate, exact: f64) -> Result<CovarianceEstimate> {
        if reference.n_samples != self.n_samples || reference.batch_values.len() != self.batch_values.len() {
            return Err(Error::Shape("control variate uses different samples".into()));
        }
        let batch_values: Vec<f64> =
            self.batch_values.iter().zip(&reference.batch_values).map(|(a, b)| a - b + exact).collect();
        Ok(CovarianceEstimate {
            value: self.value - reference.value + exact,
            stderr: stderr_of_mean(&batch_values),
            n_samples: self.n_samples,
            batch_values,
        })
    }
}

/// Unbiased sample covariance of paired observations, with the standard error
/// obtained from the spread of per-batch covariances over `batches`
/// contiguous batches.
pub fn batch_covariance(x: &[f64], y: &[f64], batches: usize) -> Result<CovarianceEstimate> {
    let n = x.len();
    if y.len() != n {
        return Err(Error::Shape("covariance inputs differ in length".into()));
    }
    if n < 2 * batches || batches < 2 {
        return Err(Error::param(format!(
            "{n} samples are too few for {batches} batches"
        )));
    }
    let value = covariance(x, y);
    let batch_values: Vec<f64> = (0..batches)
        .map(|b| {
            let lo = b * n / batches;
            let hi = (b + 1) * n / batches;
            covariance(&x[lo..hi], &y[lo..hi])
        })
        .collect();
    let stderr = stderr_of_mean(&batch_values);
    Ok(CovarianceEstimate { value, stderr, n_samples: n, batch_values })
}

/// Covariance `E[T] - E[X] E[Y]` from per-sample observations of a product
/// statistic `T` (with `E[T] = E[X Y]`) and of `X`, `Y`. The cross term uses
/// distinct samples only, so the estimate is unbiased; with `T = X Y` it is the
/// usual sample covariance.
pub fn product_covariance(products: &[f64], x: &[f64], y: &[f64], batches: usize) -> Result<CovarianceEstimate> {
    let n = products.len();
    if x.len() != n || y.len() != n {
        return Err(Error::Shape("covariance inputs differ in length".into()));
    }
    if n < 2 * batches || batches < 2 {
        return Err(Error::param(format!("{n} samples are too few for {batches} batches")));
    }
    let estimate = |lo: usize, hi: usize| {
        let m = (hi - lo) as f64;
        let t: f64 = products[lo..hi].iter().sum::<f64>() / m;
        let sx: f64 = x[lo..hi].iter().sum();
        let sy: f64 = y[lo..hi].iter().sum();
        let sxy: f64 = x[lo..hi].iter().zip(&y[lo..hi]).map(|(a, b)| a * b).sum();
        t - (sx * sy - sxy) / (m * (m - 1.0))
    };
    let value = estimate(0, n);
    let batch_values: Vec<f64> =
        (0..batches).map(|b| estimate(b * n / batches, (b + 1) * n / batches)).collect();
    let stderr = stderr_of_mean(&batch_values);
    Ok(CovarianceEstimate { value, stderr, n_samples: n, batch_values })
}

/// Batch-means mean and standard error.
pub fn batch_mean(values: &[f64], batches: usize) -> Result<(f64, f64)> {
    let n = values.len();
    if n < batches || batches < 2 {
        return Err(Error::param(format!("{n} samples are too few for {batches} batches")));
    }
    let means: Vec<f64> = (0..batches)
        .map(|b| mean(&values[b * n / batches..(b + 1) * n / batches]))
        .collect();
    Ok((mean(values), stderr_of_mean(&means)))
}

pub fn covariance(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let mx = mean(x);
    let my = mean(y);
    x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / (n - 1) as f64
}

/// `<|X|^p>^(1/p)` from per-sample values of `<|X|^p>` (spatial averages),
/// with a delta-method standard error.
pub fn lp_moment(per_sample: &[f64], p: f64) -> (f64, f64) {
    let m = mean(per_sample);
    let se = stderr_of_mean(per_sample);
    if m <= 0.0 {
        return (0.0, 0.0);
    }
    let value = m.powf(1.0 / p);
    (value, value * se / (p * m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn exact_power_law() {
        let pts: Vec<Point> = [1.0, 2.0, 4.0, 8.0, 16.0]
            .iter()
            .map(|&x: &f64| Point::exact(x, x.powi(-2)))
            .collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.slope + 2.0).abs() < 1e-12);
        assert!(fit.intercept.abs() < 1e-12);
    }

    #[test]
    fn noisy_power_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<Point> = (1..=12)
            .map(|k| {
                let x = 1.5f64.powi(k);
                let noise: f64 = rng.sample(StandardNormal);
                let y = 5.0 * x.powi(-3) * (1.0 + 0.01 * noise);
                Point::new(x, y, 0.01 * y)
            })
            .collect();
        let fit = fit_power_law(&pts).unwrap();
        assert!((fit.slope + 3.0).abs() < 0.05);
    }

    #[test]
    fn too_few_points() {
        let pts = [Point::exact(1.0, 1.0), Point::exact(2.0, 0.5)];
        assert!(fit_power_law(&pts).is_err());
        let pts = [Point::exact(1.0, 1.0), Point::exact(2.0, -0.5), Point::exact(3.0, 0.2)];
        assert!(fit_power_law(&pts).is_err());
    }

    #[test]
    fn covariance_estimator_is_unbiased() {
        // Pairs (X, 0.6 X + 0.8 Z) have covariance 0.6.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let reps = 200;
        let estimates: Vec<f64> = (0..reps)
            .map(|_| {
                let (x, y): (Vec<f64>, Vec<f64>) = (0..64)
                    .map(|_| {
                        let a: f64 = rng.sample(StandardNormal);
                        let b: f64 = rng.sample(StandardNormal);
                        (a, 0.6 * a + 0.8 * b)
                    })
                    .unzip();
                batch_covariance(&x, &y, DEFAULT_BATCHES).unwrap().value
            })
            .collect();
        let m = mean(&estimates);
        assert!((m - 0.6).abs() < 3.0 * stderr_of_mean(&estimates));
    }

    #[test]
    fn batch_sign_stability() {
        let x: Vec<f64> = (0..32).map(|k| k as f64).collect();
        let est = batch_covariance(&x, &x, 8).unwrap();
        assert!(est.sign_stable());
        let y: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!(batch_covariance(&x, &y, 8).unwrap().value < 0.0);
    }

    #[test]
    fn control_variate_removes_shared_noise() {
        // Y = X + small noise; Cov(X, X) = 1 is known exactly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x: Vec<f64> = (0..256).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
        let raw = batch_covariance(&y, &y, 8).unwrap();
        let reference = batch_covariance(&x, &x, 8).unwrap();
        let cv = raw.with_control(&reference, 1.0).unwrap();
        assert!(cv.stderr < 0.1 * raw.stderr);
        assert!((cv.value - 1.0001).abs() < 5.0 * cv.stderr + 1e-3);
        let other = batch_covariance(&x[..128], &x[..128], 8).unwrap();
        assert!(raw.with_control(&other, 1.0).is_err());
    }

    #[test]
    fn product_covariance_reduces_to_sample_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x: Vec<f64> = (0..64).map(|_| rng.sample(StandardNormal)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.sample::<f64, _>(StandardNormal)).collect();
        let prod: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let a = product_covariance(&prod, &x, &y, 8).unwrap();
        let b = batch_covariance(&x, &y, 8).unwrap();
        assert!((a.value - b.value).abs() <= 1e-12);
        for (p, q) in a.batch_values.iter().zip(&b.batch_values) {
            assert!((p - q).abs() <= 1e-12);
        }
    }
}
