//! Run configuration read from a TOML file.
//!
//! ```toml
//! [grid]
//! dim = 2
//! side = 256
//!
//! [ensemble]
//! family = "stable-spectral"   # or "matern-like"
//! alpha0 = 1.0
//! length = 2.0
//! amplitude = 1.0
//! lambda = 0.25
//! map = "scalar-logistic"      # or "skew-logistic"
//! steepness = 1.0
//! skew = 0.0
//!
//! [scan]
//! radii = [8.0]
//! separations = [64.0, 128.0]
//! direction = [1, 0]
//! components = [1, 1, 1, 1]   # i j m l, 1-based
//! samples = 64
//! seed = 1
//! centering = "ensemble"      # or "sample"
//! control_variate = true
//! shift_average = true
//! batches = 8
//! profile_samples = 0         # > 0 adds the covariance-bound stage
//!
//! [solver]
//! tolerance = 1e-11
//! max_iterations = 1000
//!
//! [moments]
//! sizes = [16, 32, 64]
//! samples = 32
//!
//! [gateaux]
//! radius = 6.0
//! components = [1, 1]
//! steps = [1e-4, 5e-5]
//! amplitude = 0.1
//! sample = 0
//!
//! [output]
//! dir = "homlab-out"
//! ```
//!
//! All sections except `[grid]` are optional and fall back to the defaults
//! below. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::elliptic::{SolverSettings, DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE};
use crate::ensemble::{CoefficientMap, CovarianceFamily, EnsembleSpec, MapKind, SpectralCovariance};
use crate::error::{Error, Result};
use crate::grid::TorusGrid;
use crate::lab::scan::Centering;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dim: usize,
    pub side: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleSection {
    pub family: CovarianceFamily,
    pub alpha0: f64,
    pub length: f64,
    pub amplitude: f64,
    pub lambda: f64,
    pub map: MapKind,
    pub steepness: f64,
    pub skew: f64,
}

impl Default for EnsembleSection {
    fn default() -> Self {
        EnsembleSection {
            family: CovarianceFamily::StableSpectral,
            alpha0: 1.0,
            length: 2.0,
            amplitude: 1.0,
            lambda: 0.25,
            map: MapKind::ScalarLogistic,
            steepness: 1.0,
            skew: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    /// Commutator order; defaults to the hierarchy depth of the dimension.
    pub order: Option<usize>,
    pub radii: Vec<f64>,
    pub separations: Vec<f64>,
    /// Unit lattice vector `e` separating the two test functions; defaults to
    /// the first axis.
    pub direction: Option<Vec<i64>>,
    /// `[i, j, m, l]`, 1-based.
    pub components: [usize; 4],
    pub samples: usize,
    pub seed: u64,
    /// Samples used for the derivative profiles of the covariance bound; 0
    /// disables that stage.
    pub profile_samples: usize,
    /// Average the product statistic over all translates of the pair.
    pub shift_average: bool,
    pub batches: usize,
    /// Effective coefficient subtracted in the commutator.
    pub centering: Centering,
    /// Subtract the Monte Carlo covariance of the linearized commutator and
    /// add back its exact value.
    pub control_variate: bool,
}

impl Default for ScanSection {
    fn default() -> Self {
        ScanSection {
            order: None,
            radii: vec![4.0],
            separations: vec![16.0, 24.0],
            direction: None,
            components: [1, 1, 1, 1],
            samples: 64,
            seed: 1,
            profile_samples: 0,
            shift_average: true,
            batches: crate::stats::DEFAULT_BATCHES,
            centering: Centering::Ensemble,
            control_variate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub tolerance: f64,
    pub max_iterations: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection { tolerance: DEFAULT_TOLERANCE, max_iterations: DEFAULT_MAX_ITERATIONS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: PathBuf::from("homlab-out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentSection {
    pub sizes: Vec<usize>,
    pub samples: usize,
}

impl Default for MomentSection {
    fn default() -> Self {
        MomentSection { sizes: vec![16, 32, 64], samples: 32 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GateauxSection {
    pub radius: f64,
    /// `[i, j]`, 1-based.
    pub components: [usize; 2],
    pub steps: Vec<f64>,
    /// Entry size of the random symmetric perturbation.
    pub amplitude: f64,
    pub sample: u64,
}

impl Default for GateauxSection {
    fn default() -> Self {
        GateauxSection {
            radius: 6.0,
            components: [1, 1],
            steps: vec![1e-4, 5e-5],
            amplitude: 0.1,
            sample: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridSection,
    #[serde(default)]
    pub ensemble: EnsembleSection,
    #[serde(default)]
    pub scan: ScanSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub output: OutputSection,
    #[serde(default)]
    pub moments: MomentSection,
    #[serde(default)]
    pub gateaux: GateauxSection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate_basic()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn grid(&self) -> Result<TorusGrid> {
        TorusGrid::new(self.grid.dim, self.grid.side)
    }

    pub fn ensemble_spec(&self) -> Result<EnsembleSpec> {
        let e = &self.ensemble;
        Ok(EnsembleSpec {
            covariance: SpectralCovariance::new(e.family, e.alpha0, e.length, e.amplitude)?,
            map: CoefficientMap::new(e.lambda, e.map, e.steepness, e.skew)?,
            grid: self.grid()?,
            seed: self.scan.seed,
        })
    }

    pub fn solver(&self) -> Result<SolverSettings> {
        SolverSettings::new(self.solver.tolerance, self.solver.max_iterations)
    }

    pub fn order(&self) -> usize {
        self.scan.order.unwrap_or(self.grid.dim.div_ceil(2))
    }

    /// Zero-based `(i, j, m, l)`.
    pub fn components(&self) -> [usize; 4] {
        self.scan.components.map(|c| c.wrapping_sub(1))
    }

    /// Axis and sign of the separation direction.
    pub fn direction(&self) -> Result<(usize, i64)> {
        let Some(dir) = &self.scan.direction else {
            return Ok((0, 1));
        };
        if dir.len() != self.grid.dim {
            return Err(Error::Config(format!("direction must have {} entries", self.grid.dim)));
        }
        let nonzero: Vec<(usize, i64)> =
            dir.iter().enumerate().filter(|(_, v)| **v != 0).map(|(k, v)| (k, *v)).collect();
        match nonzero.as_slice() {
            [(axis, s)] if s.abs() == 1 => Ok((*axis, *s)),
            _ => Err(Error::Config(format!("direction {dir:?} is not a unit lattice vector"))),
        }
    }

    fn validate_basic(&self) -> Result<()> {
        let grid = self.grid()?;
        self.ensemble_spec()?;
        self.solver()?;
        let d = grid.dim();
        for c in self.scan.components.iter().chain(&self.gateaux.components) {
            if *c == 0 || *c > d {
                return Err(Error::Config(format!("component index {c} outside 1..={d}")));
            }
        }
        let n = self.order();
        if n == 0 || n > grid.hierarchy_depth() {
            return Err(Error::Config(format!(
                "order {n} outside 1..={} for d = {d}",
                grid.hierarchy_depth()
            )));
        }
        self.direction()?;
        Ok(())
    }

    /// Geometry checks for a decay scan: `max L + 2 max R <= M/2` and
    /// `L / R >= 4` for every pair.
    pub fn validate_scan(&self) -> Result<()> {
        let s = &self.scan;
        if s.radii.is_empty() || s.separations.is_empty() {
            return Err(Error::Config("scan needs at least one radius and one separation".into()));
        }
        if s.radii.iter().chain(&s.separations).any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::Config("radii and separations must be positive".into()));
        }
        let max_r = s.radii.iter().cloned().fold(0.0, f64::max);
        let max_l = s.separations.iter().cloned().fold(0.0, f64::max);
        let half = self.grid.side as f64 / 2.0;
        if max_l + 2.0 * max_r > half {
            return Err(Error::Config(format!(
                "max separation {max_l} + 2 x max radius {max_r} exceeds half the torus side {half}"
            )));
        }
        for &r in &s.radii {
            for &l in &s.separations {
                if l < 4.0 * r {
                    return Err(Error::Config(format!("separation {l} is less than 4 x radius {r}")));
                }
                if l.fract() != 0.0 {
                    return Err(Error::Config(format!("separation {l} is not a whole number of cells")));
                }
            }
        }
        if s.samples < 2 * s.batches || s.batches < 2 {
            return Err(Error::Config(format!(
                "{} samples are too few for {} batches",
                s.samples, s.batches
            )));
        }
        Ok(())
    }
}
