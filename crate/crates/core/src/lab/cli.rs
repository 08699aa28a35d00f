//! Command-line front end. Every subcommand reads a TOML configuration,
//! writes its tables into the output directory and finishes with a manifest.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use crate::correctors::{corrector_relation_check, moment_scan, CorrectorHierarchy, HierarchyPair};
use crate::ensemble::{covariance_tail_check, Sampler};
use crate::error::{Error, Result};
use crate::grid::MultiIndex;
use crate::lab::config::ExperimentConfig;
use crate::lab::manifest::RunManifest;
use crate::lab::output::{write_csv, write_dump, Cell};
use crate::lab::scan::run_decay_scan;
use crate::par::{init_workers, Execution};
use crate::sensitivity::{box_perturbation, gateaux_check, TestFunction};
use crate::stats::PowerFit;

#[derive(Debug, Parser)]
#[command(name = "homlab", version, about = "Corrector hierarchies and homogenization commutators on periodic lattices")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    /// Override the output directory.
    #[arg(long, short, global = true)]
    pub output: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Override the Monte Carlo sample count.
    #[arg(long, global = true)]
    pub samples: Option<usize>,
    /// Run loops sequentially.
    #[arg(long, global = true)]
    pub sequential: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dump one Gaussian field and its coefficient field.
    Sample {
        #[arg(long, default_value_t = 0)]
        index: u64,
    },
    /// Build and validate the corrector hierarchy of one sample.
    Correctors {
        #[arg(long, default_value_t = 0)]
        index: u64,
        /// Also dump corrector and flux-corrector fields.
        #[arg(long)]
        dump: bool,
    },
    /// Gateaux check of the functional derivative.
    RepCheck,
    /// Covariance decay scan over radii and separations.
    DecayScan,
    /// Corrector moments versus torus size.
    MomentScan,
    /// Tail exponent of the covariance function.
    TailCheck,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Sample { .. } => "sample",
            Command::Correctors { .. } => "correctors",
            Command::RepCheck => "rep-check",
            Command::DecayScan => "decay-scan",
            Command::MomentScan => "moment-scan",
            Command::TailCheck => "tail-check",
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("homlab: {e}");
            1
        }
    }
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, String)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("no configuration given (use --config FILE)".into()))?;
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = ExperimentConfig::from_toml(&text)?;
    if let Some(dir) = &cli.output {
        cfg.output.dir = dir.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.scan.seed = seed;
    }
    if let Some(n) = cli.samples {
        cfg.scan.samples = n;
        cfg.moments.samples = n;
    }
    // The digest covers the effective configuration, overrides included.
    let effective = cfg.to_toml();
    Ok((cfg, effective))
}

fn execute(cli: &Cli) -> Result<()> {
    let (cfg, text) = load_config(cli)?;
    let workers = init_workers();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::Parallel };
    let dir = cfg.output.dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut manifest = RunManifest::new(cli.command.name(), &text, cfg.scan.seed, workers);
    let started = Instant::now();
    let files = match &cli.command {
        Command::Sample { index } => cmd_sample(&cfg, *index, &dir)?,
        Command::Correctors { index, dump } => cmd_correctors(&cfg, *index, *dump, &dir, exec, &mut manifest)?,
        Command::RepCheck => cmd_rep_check(&cfg, &dir)?,
        Command::DecayScan => cmd_decay_scan(&cfg, &dir, exec, &mut manifest)?,
        Command::MomentScan => cmd_moment_scan(&cfg, &dir, exec)?,
        Command::TailCheck => cmd_tail_check(&cfg, &dir)?,
    };
    manifest.wall_clock_s = started.elapsed().as_secs_f64();
    for f in &files {
        manifest.add_file(&dir, f)?;
    }
    let path = manifest.write(&dir)?;
    println!("manifest: {}", path.display());
    Ok(())
}

fn cmd_sample(cfg: &ExperimentConfig, index: u64, dir: &Path) -> Result<Vec<PathBuf>> {
    let spec = cfg.ensemble_spec()?;
    let sampler = Sampler::new(spec);
    let g = sampler.gaussian(index);
    let a = crate::ensemble::apply_map(&spec.map, &g);
    let d = spec.grid.dim();
    let mut fields: Vec<&[f64]> = vec![g.values()];
    for r in 0..d {
        for c in 0..d {
            fields.push(a.entry(r, c));
        }
    }
    let bin = dir.join(format!("sample-{index}.bin"));
    write_dump(&bin, &fields)?;
    let lam = crate::sensitivity::min_symmetric_eigenvalue(&a);
    let rows = vec![
        vec!["gaussian_mean".into(), g.mean().into()],
        vec!["gaussian_variance".into(), (g.dot(&g) / g.values().len() as f64 - g.mean().powi(2)).into()],
        vec!["gaussian_max_abs".into(), g.max_abs().into()],
        vec!["min_symmetric_eigenvalue".into(), lam.into()],
    ];
    let csv = dir.join(format!("sample-{index}.csv"));
    write_csv(&csv, &["quantity", "value"], &rows)?;
    println!("sample {index}: {} fields of {} cells -> {}", fields.len(), spec.grid.len(), bin.display());
    Ok(vec![csv, bin])
}

fn print_matrix(label: &str, d: usize, m: &[f64]) {
    println!("{label}");
    for r in 0..d {
        let row: Vec<String> = (0..d).map(|c| format!("{:>14.8}", m[r * d + c])).collect();
        println!("  [{}]", row.join(" "));
    }
}

fn cmd_correctors(
    cfg: &ExperimentConfig,
    index: u64,
    dump: bool,
    dir: &Path,
    exec: Execution,
    manifest: &mut RunManifest,
) -> Result<Vec<PathBuf>> {
    let spec = cfg.ensemble_spec()?;
    let sampler = Sampler::new(spec);
    let a = sampler.coefficients(index);
    let depth = cfg.order();
    let started = Instant::now();
    let pair = HierarchyPair::build(&a, sampler.spectral(), depth, cfg.solver()?, exec)?;
    manifest.stage("hierarchy", started.elapsed().as_secs_f64());
    let d = spec.grid.dim();
    let mut abar_rows = Vec::new();
    let mut residual_rows = Vec::new();
    let mut files = Vec::new();
    for (label, h) in [("primal", pair.primal()), ("dual", pair.dual())] {
        for level in 1..=depth {
            for prefix in MultiIndex::all(level - 1, d) {
                let m = h.abar(&prefix)?;
                if label == "primal" {
                    print_matrix(&format!("abar^{level}{}", if level > 1 { format!(" {prefix}") } else { String::new() }), d, &m);
                }
                for r in 0..d {
                    for c in 0..d {
                        abar_rows.push(vec![
                            label.into(),
                            level.into(),
                            prefix.to_string().into(),
                            (r + 1).into(),
                            (c + 1).into(),
                            m[r * d + c].into(),
                        ]);
                    }
                }
            }
            let relation = corrector_relation_check(h, level)?;
            for e in h.level(level) {
                residual_rows.push(vec![
                    label.into(),
                    level.into(),
                    e.index.to_string().into(),
                    e.report.iterations.into(),
                    e.report.residual.into(),
                    e.flux_residual.into(),
                    relation.into(),
                ]);
            }
            if label == "primal" {
                println!("level {level}: corrector relation residual {relation:.3e}");
            }
        }
    }
    let diag = pair.primal().diagnostics();
    println!(
        "solver residual max {:.3e}, flux identity residual max {:.3e}, iterations max {}",
        diag.max_solver_residual, diag.max_flux_residual, diag.max_iterations
    );
    let abar_path = dir.join(format!("correctors-{index}.csv"));
    write_csv(&abar_path, &["hierarchy", "level", "prefix", "row", "col", "value"], &abar_rows)?;
    let res_path = dir.join(format!("corrector-residuals-{index}.csv"));
    write_csv(
        &res_path,
        &["hierarchy", "level", "index", "iterations", "solver_residual", "flux_residual", "relation_residual"],
        &residual_rows,
    )?;
    files.push(abar_path);
    files.push(res_path);
    if dump {
        for level in 1..=depth {
            files.push(dump_level(pair.primal(), level, index, dir)?);
        }
    }
    Ok(files)
}

/// Correctors of the level followed by the upper-triangle entries of their
/// flux correctors, in multi-index order.
fn dump_level(h: &CorrectorHierarchy, level: usize, index: u64, dir: &Path) -> Result<PathBuf> {
    let d = h.grid().dim();
    let mut owned: Vec<Vec<f64>> = Vec::new();
    for e in h.level(level) {
        owned.push(e.phi.values().to_vec());
    }
    for e in h.level(level) {
        for r in 0..d {
            for c in r + 1..d {
                owned.push(e.sigma.entry(r, c).into_values());
            }
        }
    }
    let fields: Vec<&[f64]> = owned.iter().map(Vec::as_slice).collect();
    let path = dir.join(format!("correctors-{index}-level{level}.bin"));
    write_dump(&path, &fields)?;
    Ok(path)
}

fn cmd_rep_check(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let spec = cfg.ensemble_spec()?;
    let sampler = Sampler::new(spec);
    let gc = &cfg.gateaux;
    let a = sampler.coefficients(gc.sample);
    let g = TestFunction::centered(spec.grid, gc.radius)?;
    let half = (2.0 * gc.radius).ceil() as usize;
    let delta = box_perturbation(spec.grid, g.center(), half, gc.amplitude, cfg.scan.seed);
    let [i, j] = gc.components.map(|c| c - 1);
    let table = gateaux_check(&a, sampler.spectral(), &g, i, j, cfg.order(), &delta, &gc.steps, cfg.solver()?)?;
    let rows: Vec<Vec<Cell>> = table
        .rows
        .iter()
        .map(|r| vec![r.t.into(), r.lhs.into(), r.rhs.into(), r.rel_error.into()])
        .collect();
    for r in &table.rows {
        println!("t = {:.3e}: quotient {:.12e}, derivative {:.12e}, relative error {:.3e}", r.t, r.lhs, r.rhs, r.rel_error);
    }
    for ratio in table.error_ratios() {
        println!("error ratio between consecutive steps: {ratio:.3}");
    }
    let path = dir.join("gateaux.csv");
    write_csv(&path, &["t", "lhs", "rhs", "rel_error"], &rows)?;
    Ok(vec![path])
}

fn fit_cells(fit: Option<&PowerFit>) -> Vec<Cell> {
    match fit {
        Some(f) => vec![
            f.slope.into(),
            f.slope_stderr.into(),
            f.intercept.into(),
            f.r_squared.into(),
            f.points_used.into(),
        ],
        None => vec!["".into(), "".into(), "".into(), "".into(), 0usize.into()],
    }
}

fn cmd_decay_scan(
    cfg: &ExperimentConfig,
    dir: &Path,
    exec: Execution,
    manifest: &mut RunManifest,
) -> Result<Vec<PathBuf>> {
    let result = run_decay_scan(cfg, exec)?;
    manifest.stage("sampling", result.times.sampling_s);
    manifest.stage("profiles", result.times.profiles_s);
    let rows: Vec<Vec<Cell>> = result
        .points
        .iter()
        .map(|p| {
            vec![
                p.radius.into(),
                p.separation.into(),
                p.estimate.value.into(),
                p.estimate.stderr.into(),
                p.estimate.n_samples.into(),
                p.envelope.into(),
            ]
        })
        .collect();
    let decay = dir.join("decay.csv");
    write_csv(&decay, &["R", "L", "P", "stderr", "n_samples", "envelope"], &rows)?;
    let mut fit_rows = Vec::new();
    for (kind, fits) in [("L_at_fixed_R", &result.l_fits), ("R_at_fixed_ratio", &result.r_fits)] {
        for f in fits {
            let mut row: Vec<Cell> = vec![kind.into(), f.key.into()];
            row.extend(fit_cells(f.fit.as_ref()));
            fit_rows.push(row);
            match &f.fit {
                Some(fit) => println!("{kind} {}: slope {:.3} +- {:.3}", f.key, fit.slope, fit.slope_stderr),
                None => println!("{kind} {}: no fit ({} sign-stable points)", f.key, f.used),
            }
        }
    }
    let fits = dir.join("decay-fits.csv");
    write_csv(&fits, &["kind", "key", "slope", "slope_stderr", "intercept", "r_squared", "points"], &fit_rows)?;
    println!(
        "envelope constant {:.3e} (dominates all points: {})",
        result.envelope_fit.constant, result.envelope_fit.dominated
    );
    let mut files = vec![decay, fits];
    if let Some(bound) = &result.cov_bound {
        let rows: Vec<Vec<Cell>> = result
            .points
            .iter()
            .map(|p| {
                let rhs = p.cov_rhs.unwrap_or(0.0);
                vec![
                    p.radius.into(),
                    p.separation.into(),
                    p.estimate.value.into(),
                    p.estimate.stderr.into(),
                    rhs.into(),
                    (result.lipschitz_sq * rhs).into(),
                ]
            })
            .collect();
        let path = dir.join("decay-bounds.csv");
        write_csv(&path, &["R", "L", "P", "stderr", "cov_rhs", "bound"], &rows)?;
        println!(
            "covariance bound: fitted constant {:.3e}, Lipschitz^2 {:.3e}, dominated: {}",
            bound.constant, result.lipschitz_sq, bound.dominated
        );
        files.push(path);
    }
    if !result.valid {
        return Err(Error::Diagnostic(format!(
            "{} samples failed; outputs kept but the run is invalid",
            result.skipped.len()
        )));
    }
    Ok(files)
}

fn cmd_moment_scan(cfg: &ExperimentConfig, dir: &Path, exec: Execution) -> Result<Vec<PathBuf>> {
    let spec = cfg.ensemble_spec()?;
    let stats = moment_scan(&spec, &cfg.moments.sizes, cfg.moments.samples, cfg.solver()?, exec)?;
    let rows: Vec<Vec<Cell>> = stats
        .rows
        .iter()
        .map(|r| {
            vec![
                r.side.into(),
                r.level.into(),
                r.quantity.name().into(),
                (r.p as usize).into(),
                r.value.into(),
                r.stderr.into(),
            ]
        })
        .collect();
    for f in &stats.fits {
        println!(
            "level {} {} p={}: growth exponent {:.3}, log-fit R^2 {:.3}",
            f.level,
            f.quantity.name(),
            f.p,
            f.power.slope,
            f.log_r_squared
        );
    }
    let path = dir.join("moments.csv");
    write_csv(&path, &["M", "level", "quantity", "p", "value", "stderr"], &rows)?;
    Ok(vec![path])
}

fn cmd_tail_check(cfg: &ExperimentConfig, dir: &Path) -> Result<Vec<PathBuf>> {
    let spec = cfg.ensemble_spec()?;
    let tail = covariance_tail_check(&spec)?;
    let rows: Vec<Vec<Cell>> = tail.points.iter().map(|(lag, c)| vec![(*lag).into(), (*c).into()]).collect();
    println!(
        "tail exponent {:.3} +- {:.3} (expected {:.3} for the stable family)",
        tail.fit.slope,
        tail.fit.slope_stderr,
        -(spec.grid.dim() as f64) - spec.covariance.alpha0
    );
    let path = dir.join("tail.csv");
    write_csv(&path, &["lag", "covariance"], &rows)?;
    Ok(vec![path])
}
