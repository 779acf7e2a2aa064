//! Run configuration, loaded from TOML. Unknown keys are rejected.

use std::path::Path;

use lensless_core::{
    build_grid, depth_planes_between, DiffuserParams, NoiseModel, SolverConfig, SystemGeometry, VolumeGrid,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Depth range and lattice of the reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Closest calibrated depth, mm.
    pub z_min: f64,
    /// Farthest calibrated depth, mm.
    pub z_max: f64,
    /// Number of depth planes, spaced uniformly in 1/z.
    pub planes: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            z_min: 10.86,
            z_max: 36.26,
            planes: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Rays traced per calibrated depth.
    pub rays: usize,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self { rays: 10_000_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateConfig {
    /// `none`, `gaussian:<sigma>` or `poisson:<scale>`.
    pub noise: String,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self { noise: "none".into() }
    }
}

impl SimulateConfig {
    pub fn noise_model(&self) -> CliResult<NoiseModel> {
        self.noise.parse().map_err(CliError::Validation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every random stream is derived from it.
    pub seed: u64,
    #[serde(default = "SystemGeometry::desk")]
    pub geometry: SystemGeometry,
    #[serde(default)]
    pub grid: GridConfig,
    #[serde(default)]
    pub diffuser: DiffuserParams,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            geometry: SystemGeometry::desk(),
            grid: GridConfig::default(),
            diffuser: DiffuserParams::default(),
            render: RenderConfig::default(),
            simulate: SimulateConfig::default(),
            solver: SolverConfig::default(),
        }
    }
}

/// Commented default configuration written by `init-config`.
pub const TEMPLATE: &str = r#"# Master seed for diffuser generation, ray jitter and noise.
seed = 0

# Camera layout. Pitch in µm, distances in mm, angles in degrees.
[geometry]
sensor_width_px = 256
sensor_height_px = 256
pixel_pitch = 6.5
diffuser_to_sensor_d = 8.9
aperture_width = 0.95
aperture_height = 0.95
diffuser_max_deflection_beta = 0.5
pixel_cutoff_alpha_c_x = 41.5
pixel_cutoff_alpha_c_y = 30.0
min_object_distance = 7.3
hyperfocal_distance = 2300.0

# Calibrated depths, uniform in 1/z between z_min and z_max (mm).
[grid]
z_min = 10.86
z_max = 36.26
planes = 16

# Random diffuser surface. Feature size and lattice pitch in µm, slope in degrees.
[diffuser]
feature_size = 140.0
slope = 0.7
index_contrast = 0.5
pitch = 5.0

[render]
rays = 10000000

# none | gaussian:<sigma> | poisson:<scale>
[simulate]
noise = "none"

# lambda and mu may be omitted to use data-derived defaults.
# regularizer: identity | tv3d | tv3d-aniso
[solver]
regularizer = "identity"
max_iters = 200
tol_abs = 1e-5
tol_rel = 1e-4
auto_tune = true
tune_factor = 2.0
tune_ratio = 10.0
nonneg = true
"#;

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::validation(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> CliResult<()> {
        self.geometry.validate()?;
        self.solver.validate()?;
        self.simulate.noise_model()?;
        if self.grid.planes == 0 {
            return Err(CliError::validation("config: grid.planes must be >= 1"));
        }
        if self.render.rays == 0 {
            return Err(CliError::validation("config: render.rays must be >= 1"));
        }
        Ok(())
    }

    pub fn depth_planes(&self) -> CliResult<Vec<f64>> {
        if self.grid.planes == 1 {
            return Ok(vec![self.grid.z_min]);
        }
        Ok(depth_planes_between(self.grid.z_min, self.grid.z_max, self.grid.planes)?)
    }

    /// Grid on the padded lattice (twice the sensor in each direction).
    pub fn volume_grid(&self) -> CliResult<VolumeGrid> {
        let lattice = (2 * self.geometry.sensor_width_px, 2 * self.geometry.sensor_height_px);
        Ok(build_grid(&self.geometry, &self.depth_planes()?, lattice)?)
    }
}
