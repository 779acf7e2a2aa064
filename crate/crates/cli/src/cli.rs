//! Argument parsing and dispatch.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use lensless_core::analysis::{Plane, SeparationAxis};
use lensless_core::{NoiseModel, Regularizer, SolverConfig};

use crate::commands;
use crate::config::{RunConfig, TEMPLATE};
use crate::error::{CliError, CliResult};

/// Exit status for a reconstruction that hit `max_iters` before converging.
pub const EXIT_NOT_CONVERGED: i32 = 5;

#[derive(Debug, Parser)]
#[command(name = "lensless", version, about = "Single-shot 3D lensless imaging pipeline")]
pub struct Cli {
    /// Overrides the configuration seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the default configuration file.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a random diffuser heightmap.
    GenDiffuser {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render the on-axis PSF at every depth plane.
    Calibrate {
        #[arg(long)]
        diffuser: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Rays per plane, overriding the configuration.
        #[arg(long)]
        rays: Option<usize>,
    },
    /// Simulate a sensor measurement of a scene.
    Simulate {
        /// JSON list of {x, y, z, intensity} in mm, or a volume container.
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// none | gaussian:<sigma> | poisson:<scale>
        #[arg(long, default_value = "none")]
        noise: NoiseModel,
    },
    /// Recover a volume from a measurement.
    Reconstruct {
        #[arg(long)]
        measurement: PathBuf,
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// System characterization reports (CSV).
    Analyze {
        #[command(subcommand)]
        report: Report,
    },
}

#[derive(Debug, Clone, Args)]
pub struct SolverArgs {
    /// Solver settings from a run configuration; flags override them.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// identity | tv3d | tv3d-aniso
    #[arg(long)]
    pub regularizer: Option<Regularizer>,
    #[arg(long)]
    pub no_nonneg: bool,
    #[arg(long)]
    pub no_tune: bool,
    #[arg(long)]
    pub tol_abs: Option<f64>,
    #[arg(long)]
    pub tol_rel: Option<f64>,
    /// Initial penalties as mu1,mu2,mu3.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub mu: Option<Vec<f64>>,
}

impl SolverArgs {
    pub fn resolve(&self) -> CliResult<SolverConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?.solver,
            None => SolverConfig::default(),
        };
        if let Some(n) = self.iters {
            cfg.max_iters = n;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = Some(l);
        }
        if let Some(r) = self.regularizer {
            cfg.regularizer = r;
        }
        if self.no_nonneg {
            cfg.nonneg = false;
        }
        if self.no_tune {
            cfg.auto_tune = false;
        }
        if let Some(t) = self.tol_abs {
            cfg.tol_abs = t;
        }
        if let Some(t) = self.tol_rel {
            cfg.tol_rel = t;
        }
        if let Some(m) = &self.mu {
            cfg.mu = Some([m[0], m[1], m[2]]);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Subcommand)]
pub enum Report {
    /// Angular field of view and axial range.
    Fov {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the full-size prototype geometry instead of the configuration.
        #[arg(long)]
        prototype: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Two-point resolvability over a list of separations.
    TwoPoint {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        plane: usize,
        #[arg(long, default_value = "x")]
        axis: SeparationAxis,
        /// Voxel separations, e.g. `1,2,4` or `1..10`.
        #[arg(long)]
        separations: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Square constellation resolvability over a list of spacings.
    MultiPoint {
        #[arg(long)]
        stack: PathBuf,
        /// First (x–z) or only (x–y) depth plane.
        #[arg(long)]
        plane: usize,
        #[arg(long, default_value = "xy")]
        layout: Plane,
        #[arg(long, default_value_t = 4)]
        side: usize,
        /// Lateral spacings in voxels, e.g. `2,4` or `2..6`.
        #[arg(long)]
        spacings: String,
        /// Plane step between rows of an x–z constellation.
        #[arg(long, default_value_t = 1)]
        axial_spacing: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        solver: SolverArgs,
    },
    /// Local condition numbers of square constellations.
    Conditioning {
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        plane: usize,
        #[arg(long, default_value = "xy")]
        layout: Plane,
        /// Constellation sizes (perfect squares), e.g. `4,9,16`.
        #[arg(long, default_value = "4,9,16,25")]
        n: String,
        #[arg(long, default_value = "1..10")]
        separations: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Off-axis PSF similarity to the on-axis PSF.
    PsfSimilarity {
        #[arg(long)]
        diffuser: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Source depth, mm.
        #[arg(long)]
        z: f64,
        /// Field angles in degrees, comma separated.
        #[arg(long, value_delimiter = ',', default_value = "0,5,10,15,20,25,30")]
        angles: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `a,b,c` or an inclusive range `a..b`.
pub fn parse_list(s: &str) -> CliResult<Vec<usize>> {
    let bad = |e: std::num::ParseIntError| CliError::validation(format!("bad list `{s}`: {e}"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (usize, usize) = (a.trim().parse().map_err(bad)?, b.trim().parse().map_err(bad)?);
        if a > b {
            return Err(CliError::validation(format!("empty range `{s}`")));
        }
        return Ok((a..=b).collect());
    }
    s.split(',').map(|t| t.trim().parse().map_err(bad)).collect()
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> CliResult<i32> {
    if let Some(n) = cli.threads {
        // Only the first pool configuration in a process takes effect.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let seed = cli.seed;
    match cli.command {
        Command::InitConfig { out } => {
            std::fs::write(&out, TEMPLATE).map_err(|e| CliError::io(&out, e))?;
        }
        Command::GenDiffuser { config, out } => {
            let cfg = load_config(&config, seed)?;
            let path = commands::gen_diffuser(&cfg, &out)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Calibrate { diffuser, config, out, rays } => {
            let mut cfg = load_config(&config, seed)?;
            if let Some(r) = rays {
                cfg.render.rays = r;
            }
            cfg.validate()?;
            let path = commands::calibrate_stack(&diffuser, &cfg, &out)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Simulate { scene, stack, out, noise } => {
            let path = commands::simulate(&scene, &stack, noise, seed.unwrap_or(0), &out)?;
            eprintln!("wrote {}", path.display());
        }
        Command::Reconstruct { measurement, stack, out, solver } => {
            let cfg = solver.resolve()?;
            let r = commands::reconstruct(&measurement, &stack, &cfg, &out)?;
            eprintln!(
                "wrote {}, {}, {} after {} iterations ({})",
                r.volume.display(),
                r.trace.display(),
                r.png.display(),
                r.iterations,
                if r.converged { "converged" } else { "not converged" }
            );
            if !r.converged {
                return Ok(EXIT_NOT_CONVERGED);
            }
        }
        Command::Analyze { report } => run_report(report, seed)?,
    }
    Ok(0)
}

fn run_report(report: Report, seed: Option<u64>) -> CliResult<()> {
    match report {
        Report::Fov { config, prototype, out } => {
            let geometry = match (prototype, config) {
                (true, _) => lensless_core::SystemGeometry::prototype(),
                (false, Some(p)) => load_config(&p, seed)?.geometry,
                (false, None) => lensless_core::SystemGeometry::desk(),
            };
            commands::analyze_fov(&geometry, out.as_deref())?;
        }
        Report::TwoPoint { stack, plane, axis, separations, out, solver } => {
            let seps = parse_list(&separations)?;
            commands::analyze_two_point(&stack, plane, axis, &seps, &solver.resolve()?, out.as_deref())?;
        }
        Report::MultiPoint { stack, plane, layout, side, spacings, axial_spacing, out, solver } => {
            let sp = parse_list(&spacings)?;
            commands::analyze_multi_point(
                &stack,
                plane,
                layout,
                side,
                &sp,
                axial_spacing,
                &solver.resolve()?,
                out.as_deref(),
            )?;
        }
        Report::Conditioning { stack, plane, layout, n, separations, out } => {
            let n = parse_list(&n)?;
            let seps = parse_list(&separations)?;
            commands::analyze_conditioning(&stack, plane, layout, &n, &seps, out.as_deref())?;
        }
        Report::PsfSimilarity { diffuser, config, z, angles, out } => {
            let cfg = load_config(&config, seed)?;
            commands::analyze_psf_similarity(&diffuser, &cfg, z, &angles, out.as_deref())?;
        }
    }
    Ok(())
}
