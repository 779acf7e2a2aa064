//! Synthetic diffuser surfaces and geometric caustic rendering.
//!
//! The diffuser is a smooth random heightmap: Gaussian low-pass filtered
//! white noise, scaled to a target mean slope. PSFs are rendered by tracing
//! rays from a point source through the aperture, deflecting them with the
//! thin phase-screen law (the surface gradient, times the index contrast,
//! adds to the transverse direction cosines) and binning their landing points
//! on the sensor. Each ray carries equal aperture area; obliquity and
//! distance falloff are not modeled.

use ndarray::{Array2, Array3, Axis, Zip};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fft::{Direction, FftPlan};
use crate::forward::{ConvOperator, SensorImage, Volume, Voxel};
use crate::grid::{FovReport, SystemGeometry, VolumeGrid};

/// Regular sampling lattice of the diffuser surface.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub nx: usize,
    pub ny: usize,
    /// µm
    pub pitch: f64,
}

impl Lattice {
    /// Smallest lattice at `pitch` covering a `width × height` mm aperture, plus margin.
    pub fn covering(width_mm: f64, height_mm: f64, pitch_um: f64) -> Self {
        let n = |mm: f64| ((mm * 1e3 / pitch_um) * 1.1).ceil() as usize + 2;
        Self {
            nx: n(width_mm),
            ny: n(height_mm),
            pitch: pitch_um,
        }
    }
}

/// Statistical description of a diffuser to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffuserParams {
    /// Autocorrelation FWHM of the surface, µm.
    pub feature_size: f64,
    /// Mean surface slope magnitude, degrees.
    pub slope: f64,
    /// n − 1 of the diffuser material.
    pub index_contrast: f64,
    /// Lattice pitch, µm.
    pub pitch: f64,
}

impl Default for DiffuserParams {
    fn default() -> Self {
        Self {
            feature_size: 140.0,
            slope: 0.7,
            index_contrast: 0.5,
            pitch: 5.0,
        }
    }
}

/// Heightmap (µm) of a thin refracting surface, periodic over its lattice.
#[derive(Clone, Debug)]
pub struct DiffuserSurface {
    heightmap: Array2<f64>,
    grad_x: Array2<f64>,
    grad_y: Array2<f64>,
    pub pitch: f64,
    pub feature_size: f64,
    /// Target mean slope magnitude, degrees.
    pub rms_slope: f64,
    pub refractive_index_contrast: f64,
    pub rng_seed: u64,
}

impl DiffuserSurface {
    /// Wraps an existing heightmap `(ny, nx)` in µm.
    pub fn from_heightmap(
        heightmap: Array2<f64>,
        pitch: f64,
        feature_size: f64,
        rms_slope: f64,
        refractive_index_contrast: f64,
        rng_seed: u64,
    ) -> Result<Self> {
        if heightmap.is_empty() {
            return Err(invalid("heightmap", "must be non-empty"));
        }
        if !(pitch > 0.0) {
            return Err(invalid("pitch", "must be > 0"));
        }
        let (grad_x, grad_y) = periodic_gradient(&heightmap, pitch);
        Ok(Self {
            heightmap,
            grad_x,
            grad_y,
            pitch,
            feature_size,
            rms_slope,
            refractive_index_contrast,
            rng_seed,
        })
    }

    /// Flat (h ≡ 0) surface; renders the geometric shadow of the aperture.
    pub fn flat(lattice: Lattice) -> Self {
        Self::from_heightmap(Array2::zeros((lattice.ny, lattice.nx)), lattice.pitch, 0.0, 0.0, 0.5, 0)
            .expect("valid lattice")
    }

    pub fn heightmap(&self) -> &Array2<f64> {
        &self.heightmap
    }

    pub fn lattice(&self) -> Lattice {
        let (ny, nx) = self.heightmap.dim();
        Lattice { nx, ny, pitch: self.pitch }
    }

    /// Mean |∇h| expressed as an angle in degrees.
    pub fn mean_slope_deg(&self) -> f64 {
        mean_gradient_magnitude(&self.grad_x, &self.grad_y).atan().to_degrees()
    }

    /// Bilinear gradient at (x, y) mm relative to the lattice centre, wrapping periodically.
    fn gradient_at(&self, x_mm: f64, y_mm: f64) -> (f64, f64) {
        let (ny, nx) = self.heightmap.dim();
        let u = x_mm * 1e3 / self.pitch + nx as f64 / 2.0;
        let v = y_mm * 1e3 / self.pitch + ny as f64 / 2.0;
        let (u0, v0) = (u.floor(), v.floor());
        let (fu, fv) = (u - u0, v - v0);
        let i0 = (v0 as i64).rem_euclid(ny as i64) as usize;
        let j0 = (u0 as i64).rem_euclid(nx as i64) as usize;
        let i1 = (i0 + 1) % ny;
        let j1 = (j0 + 1) % nx;
        let lerp = |a: &Array2<f64>| {
            (1.0 - fv) * ((1.0 - fu) * a[(i0, j0)] + fu * a[(i0, j1)]) + fv * ((1.0 - fu) * a[(i1, j0)] + fu * a[(i1, j1)])
        };
        (lerp(&self.grad_x), lerp(&self.grad_y))
    }
}

fn periodic_gradient(h: &Array2<f64>, pitch: f64) -> (Array2<f64>, Array2<f64>) {
    let (ny, nx) = h.dim();
    let gx = Array2::from_shape_fn((ny, nx), |(i, j)| {
        (h[(i, (j + 1) % nx)] - h[(i, (j + nx - 1) % nx)]) / (2.0 * pitch)
    });
    let gy = Array2::from_shape_fn((ny, nx), |(i, j)| {
        (h[((i + 1) % ny, j)] - h[((i + ny - 1) % ny, j)]) / (2.0 * pitch)
    });
    (gx, gy)
}

fn mean_gradient_magnitude(gx: &Array2<f64>, gy: &Array2<f64>) -> f64 {
    let total: f64 = Zip::from(gx).and(gy).fold(0.0, |acc, a, b| acc + a.hypot(*b));
    total / gx.len() as f64
}

/// Gaussian kernel width (lattice samples) whose filtered-noise autocorrelation has the given FWHM.
///
/// Filtering white noise with a Gaussian of standard deviation σ gives a
/// Gaussian autocorrelation of standard deviation σ√2, i.e. FWHM = 4√(ln 2)·σ.
pub fn kernel_sigma_for_feature(feature_samples: f64) -> f64 {
    feature_samples / (4.0 * std::f64::consts::LN_2.sqrt())
}

pub fn generate_diffuser(seed: u64, params: &DiffuserParams, lattice: Lattice) -> Result<DiffuserSurface> {
    if !(lattice.pitch > 0.0) {
        return Err(invalid("pitch", "must be > 0"));
    }
    if lattice.nx < 4 || lattice.ny < 4 {
        return Err(invalid("lattice", "need at least 4×4 samples"));
    }
    let feature_samples = params.feature_size / lattice.pitch;
    if !(feature_samples > 2.0) {
        return Err(invalid(
            "feature_size",
            format!(
                "{} µm is below the lattice resolution (needs > 2 × {} µm)",
                params.feature_size, lattice.pitch
            ),
        ));
    }
    if !(params.slope > 0.0 && params.slope < 90.0) {
        return Err(invalid("slope", "must lie in (0°, 90°)"));
    }
    if !(params.index_contrast > 0.0) {
        return Err(invalid("index_contrast", "must be > 0"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = Array2::from_shape_simple_fn((lattice.ny, lattice.nx), || {
        let v: f64 = rng.sample(StandardNormal);
        Complex64::new(v, 0.0)
    });
    let plan = FftPlan::new(&[lattice.ny, lattice.nx]);
    plan.process(field.view_mut(), Direction::Forward);
    let sigma = kernel_sigma_for_feature(feature_samples);
    let two_pi2_s2 = 2.0 * std::f64::consts::PI.powi(2) * sigma * sigma;
    let freq = |k: usize, n: usize| {
        let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
        k / n as f64
    };
    for ((i, j), c) in field.indexed_iter_mut() {
        let f2 = freq(i, lattice.ny).powi(2) + freq(j, lattice.nx).powi(2);
        *c *= (-two_pi2_s2 * f2).exp();
    }
    plan.process(field.view_mut(), Direction::Inverse);
    let mut h = field.mapv(|c| c.re);
    let mean = h.mean().unwrap_or(0.0);
    h.mapv_inplace(|v| v - mean);

    let (gx, gy) = periodic_gradient(&h, lattice.pitch);
    let current = mean_gradient_magnitude(&gx, &gy);
    if !(current > 0.0) {
        return Err(Error::Numerical("generated surface is flat".into()));
    }
    let scale = params.slope.to_radians().tan() / current;
    h.mapv_inplace(|v| v * scale);
    DiffuserSurface::from_heightmap(
        h,
        lattice.pitch,
        params.feature_size,
        params.slope,
        params.index_contrast,
        seed,
    )
}

/// Ray budget and sampling seed for a render.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    pub rays: usize,
    pub seed: u64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            rays: 10_000_000,
            seed: 0,
        }
    }
}

/// Renders the caustic of a point source at `(x, y, z)` mm, normalized to unit sum.
///
/// Returns an `(Ny, Nx)` image on the sensor lattice. Rays are stratified over
/// the aperture with per-row jitter streams and binned with integer counts, so
/// the result is independent of thread scheduling.
pub fn render_psf_at(
    surface: &DiffuserSurface,
    source: (f64, f64, f64),
    geom: &SystemGeometry,
    opts: RenderOptions,
) -> Result<Array2<f64>> {
    geom.validate()?;
    let (sx, sy, z) = source;
    if !(z.is_finite() && z > 0.0) {
        return Err(invalid("z", "depth must be > 0"));
    }
    if opts.rays == 0 {
        return Err(invalid("rays", "must be > 0"));
    }
    let (w, hgt) = (geom.aperture_width, geom.aperture_height);
    let aspect = w / hgt;
    let gy = ((opts.rays as f64 / aspect).sqrt().round() as usize).max(1);
    let gx = ((opts.rays as f64 / gy as f64).round() as usize).max(1);
    let (cell_x, cell_y) = (w / gx as f64, hgt / gy as f64);
    let (nx, ny) = (geom.sensor_width_px, geom.sensor_height_px);
    let pitch_mm = geom.pixel_pitch * 1e-3;
    let d = geom.diffuser_to_sensor_d;
    let contrast = surface.refractive_index_contrast;

    let counts = (0..gy)
        .into_par_iter()
        .fold(
            || vec![0u32; nx * ny],
            |mut hist, row| {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(row as u64);
                let y_base = -hgt / 2.0 + row as f64 * cell_y;
                for col in 0..gx {
                    let jx: f64 = rng.random();
                    let jy: f64 = rng.random();
                    let x = -w / 2.0 + (col as f64 + jx) * cell_x;
                    let y = y_base + jy * cell_y;
                    let (dx, dy) = (x - sx, y - sy);
                    let r = (dx * dx + dy * dy + z * z).sqrt();
                    let (g_x, g_y) = surface.gradient_at(x, y);
                    let a = dx / r + contrast * g_x;
                    let b = dy / r + contrast * g_y;
                    let c2 = 1.0 - a * a - b * b;
                    if c2 <= 0.0 {
                        continue;
                    }
                    let c = c2.sqrt();
                    let u = (x + d * a / c) / pitch_mm + nx as f64 / 2.0;
                    let v = (y + d * b / c) / pitch_mm + ny as f64 / 2.0;
                    if u < 0.0 || v < 0.0 {
                        continue;
                    }
                    let (ju, iv) = (u as usize, v as usize);
                    if ju < nx && iv < ny {
                        hist[iv * nx + ju] += 1;
                    }
                }
                hist
            },
        )
        .reduce(
            || vec![0u32; nx * ny],
            |mut a, b| {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
                a
            },
        );
    let total: u64 = counts.iter().map(|&c| c as u64).sum();
    if total == 0 {
        return Err(Error::Numerical(format!("no rays from source at z = {z} mm reached the sensor")));
    }
    let inv = 1.0 / total as f64;
    Ok(Array2::from_shape_vec((ny, nx), counts.into_iter().map(|c| c as f64 * inv).collect())
        .expect("histogram shape"))
}

/// On-axis caustic at depth `z`.
pub fn render_psf(surface: &DiffuserSurface, z: f64, geom: &SystemGeometry, opts: RenderOptions) -> Result<Array2<f64>> {
    if z < geom.min_object_distance {
        return Err(invalid(
            "z",
            format!("{z} mm is closer than min_object_distance {}", geom.min_object_distance),
        ));
    }
    render_psf_at(surface, (0.0, 0.0, z), geom, opts)
}

/// One on-axis PSF per calibrated depth, `(Nz, Ny, Nx)`, each summing to 1.
#[derive(Clone, Debug, PartialEq)]
pub struct PsfStack {
    pub psfs: Array3<f64>,
    pub depth_planes: Vec<f64>,
}

impl PsfStack {
    pub fn new(psfs: Array3<f64>, depth_planes: Vec<f64>) -> Result<Self> {
        if psfs.dim().0 != depth_planes.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![depth_planes.len()],
                actual: vec![psfs.dim().0],
            });
        }
        if psfs.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("psfs", "values must be finite and nonnegative"));
        }
        Ok(Self { psfs, depth_planes })
    }

    pub fn nz(&self) -> usize {
        self.depth_planes.len()
    }

    pub fn sensor_shape(&self) -> (usize, usize) {
        let (_, ny, nx) = self.psfs.dim();
        (ny, nx)
    }

    /// Rescales every slice to unit sum.
    pub fn normalize(&mut self) -> Result<()> {
        for (k, mut slice) in self.psfs.outer_iter_mut().enumerate() {
            let s = slice.sum();
            if !(s > 0.0) {
                return Err(Error::Numerical(format!("PSF slice {k} has zero energy")));
            }
            slice.mapv_inplace(|v| v / s);
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            psfs: &self.psfs * factor,
            depth_planes: self.depth_planes.clone(),
        }
    }
}

/// Renders the on-axis PSF at every depth of `grid`. Plane `k` uses jitter stream seed `opts.seed + k`.
pub fn calibrate(
    surface: &DiffuserSurface,
    grid: &VolumeGrid,
    geom: &SystemGeometry,
    opts: RenderOptions,
) -> Result<PsfStack> {
    let (ny, nx) = (geom.sensor_height_px, geom.sensor_width_px);
    let mut psfs = Array3::zeros((grid.nz(), ny, nx));
    for (k, &z) in grid.depth_planes.iter().enumerate() {
        let slice = render_psf(
            surface,
            z,
            geom,
            RenderOptions {
                rays: opts.rays,
                seed: opts.seed.wrapping_add(k as u64),
            },
        )?;
        psfs.index_axis_mut(Axis(0), k).assign(&slice);
    }
    PsfStack::new(psfs, grid.depth_planes.clone())
}

/// A point emitter, position in mm (x, y lateral, z from the diffuser).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointSource {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub intensity: f64,
}

#[derive(Clone, Debug)]
pub enum Scene {
    Points(Vec<PointSource>),
    /// A volume on the operator lattice.
    Dense(Volume),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum NoiseModel {
    #[default]
    None,
    /// Additive white Gaussian noise of standard deviation `sigma`.
    Gaussian { sigma: f64 },
    /// Photon noise: `Poisson(b · scale) / scale`.
    Poisson { scale: f64 },
}

impl NoiseModel {
    /// Gaussian noise at a given SNR (dB) relative to the RMS of `clean`.
    pub fn gaussian_for_snr(clean: &Array2<f64>, snr_db: f64) -> Self {
        let rms = (clean.iter().map(|v| v * v).sum::<f64>() / clean.len().max(1) as f64).sqrt();
        NoiseModel::Gaussian {
            sigma: rms * 10f64.powf(-snr_db / 20.0),
        }
    }
}

impl std::str::FromStr for NoiseModel {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (kind, value) = s.split_once(':').unwrap_or((s, ""));
        let parse = |v: &str| v.parse::<f64>().map_err(|e| format!("bad noise parameter `{v}`: {e}"));
        match kind {
            "none" => Ok(NoiseModel::None),
            "gaussian" => Ok(NoiseModel::Gaussian { sigma: parse(value)? }),
            "poisson" => Ok(NoiseModel::Poisson { scale: parse(value)? }),
            other => Err(format!("unknown noise model `{other}` (none, gaussian:<sigma>, poisson:<scale>)")),
        }
    }
}

/// Maps a physical point source onto the nearest voxel of the operator lattice.
///
/// Returns `None` when the source falls outside the calibrated depth range or
/// the lateral extent of the lattice.
pub fn rasterize_point(p: &PointSource, grid: &VolumeGrid, lattice: (usize, usize)) -> Option<Voxel> {
    let nz = grid.nz();
    let k = grid.nearest_plane(p.z);
    let zk = grid.depth_planes[k];
    let tol = if nz == 1 {
        1e-6 * zk
    } else {
        let gap = if k + 1 < nz {
            grid.depth_planes[k + 1] - zk
        } else {
            zk - grid.depth_planes[k - 1]
        };
        0.5 * gap
    };
    if (p.z - zk).abs() > tol {
        return None;
    }
    let (py, px) = lattice;
    let pitch_mm = grid.lateral_pitch[k] * 1e-3;
    let col = (px / 2) as f64 + (p.x / pitch_mm).round();
    let row = (py / 2) as f64 + (p.y / pitch_mm).round();
    if col < 0.0 || row < 0.0 || col >= px as f64 || row >= py as f64 {
        return None;
    }
    Some(Voxel {
        plane: k,
        row: row as usize,
        col: col as usize,
        weight: p.intensity,
    })
}

/// Physical position (mm) of a voxel on the operator lattice.
pub fn voxel_position(grid: &VolumeGrid, lattice: (usize, usize), plane: usize, row: usize, col: usize) -> PointSource {
    let pitch_mm = grid.lateral_pitch[plane] * 1e-3;
    PointSource {
        x: (col as f64 - (lattice.1 / 2) as f64) * pitch_mm,
        y: (row as f64 - (lattice.0 / 2) as f64) * pitch_mm,
        z: grid.depth_planes[plane],
        intensity: 1.0,
    }
}

/// `b = A v + noise`, clamped to be nonnegative.
///
/// Point scenes are evaluated exactly as sums of shifted PSF slices; dense
/// scenes go through the FFT operator. When `fov` is given, sources beyond the
/// angular half-FoV are rejected as well.
pub fn simulate_measurement(
    scene: &Scene,
    op: &ConvOperator,
    grid: &VolumeGrid,
    fov: Option<&FovReport>,
    noise: NoiseModel,
    seed: u64,
) -> Result<SensorImage> {
    if grid.nz() != op.nz() {
        return Err(Error::ShapeMismatch {
            expected: vec![op.nz()],
            actual: vec![grid.nz()],
        });
    }
    let mut b = match scene {
        Scene::Points(points) => {
            let lattice = op.padded_shape();
            let mut bad = Vec::new();
            let mut voxels = Vec::with_capacity(points.len());
            for (i, p) in points.iter().enumerate() {
                let in_angle = fov.is_none_or(|f| {
                    (p.x.abs() / p.z).atan().to_degrees() <= f.x.half_angle
                        && (p.y.abs() / p.z).atan().to_degrees() <= f.y.half_angle
                });
                match rasterize_point(p, grid, lattice) {
                    Some(v) if in_angle && p.intensity >= 0.0 && p.intensity.is_finite() => voxels.push(v),
                    _ => bad.push(i),
                }
            }
            if !bad.is_empty() {
                return Err(Error::SourcesOutsideFov { indices: bad });
            }
            op.apply_sparse(&voxels)?
        }
        Scene::Dense(v) => {
            if v.data.iter().any(|&x| x < 0.0 || !x.is_finite()) {
                return Err(invalid("scene", "dense scene intensities must be finite and >= 0"));
            }
            op.apply(v)?
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match noise {
        NoiseModel::None => {}
        NoiseModel::Gaussian { sigma } => {
            if !(sigma >= 0.0) {
                return Err(invalid("sigma", "must be >= 0"));
            }
            if sigma > 0.0 {
                let dist = Normal::new(0.0, sigma).map_err(|e| invalid("sigma", e.to_string()))?;
                b.data.mapv_inplace(|v| v + dist.sample(&mut rng));
            }
        }
        NoiseModel::Poisson { scale } => {
            if !(scale > 0.0) {
                return Err(invalid("scale", "must be > 0"));
            }
            b.data.mapv_inplace(|v| {
                let lambda = (v * scale).max(0.0);
                if lambda == 0.0 {
                    0.0
                } else {
                    Poisson::new(lambda).map(|d| d.sample(&mut rng) / scale).unwrap_or(v)
                }
            });
        }
    }
    b.data.mapv_inplace(|v| v.max(0.0));
    b.exposure = Some(format!("{noise:?}"));
    Ok(b)
}

/// Sums 2×2 pixel blocks; a trailing odd row or column is dropped.
pub fn bin2x2(img: &Array2<f64>) -> Array2<f64> {
    let (ny, nx) = img.dim();
    Array2::from_shape_fn((ny / 2, nx / 2), |(i, j)| {
        img[(2 * i, 2 * j)] + img[(2 * i + 1, 2 * j)] + img[(2 * i, 2 * j + 1)] + img[(2 * i + 1, 2 * j + 1)]
    })
}

/// Bounding box `(rows, cols)` extent of the brightest pixels holding `fraction` of the energy.
pub fn energy_bounding_box(img: &Array2<f64>, fraction: f64) -> (usize, usize) {
    let total: f64 = img.sum();
    let mut idx: Vec<((usize, usize), f64)> = img.indexed_iter().map(|(i, &v)| (i, v)).collect();
    idx.sort_by(|a, b| b.1.total_cmp(&a.1));
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    let mut acc = 0.0;
    for ((r, c), v) in idx {
        if acc >= fraction * total {
            break;
        }
        acc += v;
        r0 = r0.min(r);
        r1 = r1.max(r);
        c0 = c0.min(c);
        c1 = c1.max(c);
    }
    if r0 == usize::MAX {
        return (0, 0);
    }
    (r1 - r0 + 1, c1 - c0 + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;

    fn small_geom() -> SystemGeometry {
        SystemGeometry {
            sensor_width_px: 64,
            sensor_height_px: 64,
            aperture_width: 0.3,
            aperture_height: 0.3,
            ..SystemGeometry::prototype()
        }
    }

    #[test]
    fn diffuser_is_deterministic() {
        let lat = Lattice { nx: 64, ny: 48, pitch: 5.0 };
        let a = generate_diffuser(1, &DiffuserParams::default(), lat).unwrap();
        let b = generate_diffuser(1, &DiffuserParams::default(), lat).unwrap();
        assert_eq!(a.heightmap(), b.heightmap());
        let c = generate_diffuser(2, &DiffuserParams::default(), lat).unwrap();
        assert_ne!(a.heightmap(), c.heightmap());
    }

    #[test]
    fn diffuser_rejects_subresolution_features() {
        let lat = Lattice { nx: 32, ny: 32, pitch: 80.0 };
        let err = generate_diffuser(1, &DiffuserParams::default(), lat).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { field: "feature_size", .. }));
    }

    #[test]
    fn flat_surface_renders_aperture_shadow() {
        let geom = small_geom();
        let lat = Lattice::covering(0.2, 0.2, 5.0);
        let geom = SystemGeometry { aperture_width: 0.2, aperture_height: 0.2, ..geom };
        let psf = render_psf(&DiffuserSurface::flat(lat), 20.0, &geom, RenderOptions { rays: 200_000, seed: 3 }).unwrap();
        assert!((psf.sum() - 1.0).abs() < 1e-12);
        // footprint = aperture · (1 + d / z)
        let side_px = 0.2 * (1.0 + 8.9 / 20.0) / 6.5e-3;
        let lit: Vec<_> = psf.indexed_iter().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect();
        let rows = lit.iter().map(|p| p.0).max().unwrap() - lit.iter().map(|p| p.0).min().unwrap() + 1;
        let cols = lit.iter().map(|p| p.1).max().unwrap() - lit.iter().map(|p| p.1).min().unwrap() + 1;
        assert!((rows as f64 - side_px).abs() <= 2.0, "{rows} vs {side_px}");
        assert!((cols as f64 - side_px).abs() <= 2.0);
        // centred
        let mean_r = lit.iter().map(|p| p.0 as f64).sum::<f64>() / lit.len() as f64;
        assert!((mean_r - 31.5).abs() < 1.0);
        // uniform interior
        let interior: Vec<f64> = psf.slice(ndarray::s![28..36, 28..36]).iter().copied().collect();
        let m = interior.iter().sum::<f64>() / interior.len() as f64;
        assert!(interior.iter().all(|v| (v - m).abs() < 0.2 * m));
    }

    #[test]
    fn calibration_stack_slices_are_normalized() {
        let geom = small_geom();
        let surface = generate_diffuser(4, &DiffuserParams::default(), Lattice::covering(0.3, 0.3, 5.0)).unwrap();
        let grid = build_grid(&geom, &[12.0, 20.0, 30.0], (128, 128)).unwrap();
        let stack = calibrate(&surface, &grid, &geom, RenderOptions { rays: 100_000, seed: 1 }).unwrap();
        assert_eq!(stack.psfs.dim(), (3, 64, 64));
        for s in stack.psfs.outer_iter() {
            assert!((s.sum() - 1.0).abs() < 1e-6);
            assert!(s.iter().all(|&v| v >= 0.0));
        }
        let again = calibrate(&surface, &grid, &geom, RenderOptions { rays: 100_000, seed: 1 }).unwrap();
        assert_eq!(stack, again);
    }

    #[test]
    fn render_rejects_sources_closer_than_minimum() {
        let geom = small_geom();
        let s = DiffuserSurface::flat(Lattice::covering(0.3, 0.3, 5.0));
        assert!(render_psf(&s, 5.0, &geom, RenderOptions { rays: 10, seed: 0 }).is_err());
    }

    #[test]
    fn noise_model_parsing() {
        assert_eq!("none".parse::<NoiseModel>().unwrap(), NoiseModel::None);
        assert_eq!("gaussian:0.5".parse::<NoiseModel>().unwrap(), NoiseModel::Gaussian { sigma: 0.5 });
        assert_eq!("poisson:100".parse::<NoiseModel>().unwrap(), NoiseModel::Poisson { scale: 100.0 });
        assert!("gaussian:x".parse::<NoiseModel>().is_err());
        assert!("speckle".parse::<NoiseModel>().is_err());
    }

    #[test]
    fn binning_sums_blocks() {
        let img = Array2::from_shape_fn((4, 5), |(i, j)| (i * 5 + j) as f64);
        let b = bin2x2(&img);
        assert_eq!(b.dim(), (2, 2));
        assert_eq!(b[(0, 0)], 0.0 + 1.0 + 5.0 + 6.0);
        assert_eq!(b[(1, 1)], 12.0 + 13.0 + 17.0 + 18.0);
    }
}
