//! Pipeline commands. Each reads its inputs, never modifies them, and writes
//! new artifacts.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use lensless_core::analysis::{
    conditioning_sweep, multi_point_test, psf_similarity, two_point_test, Plane, SeparationAxis,
};
use lensless_core::optics::render_psf_at;
use lensless_core::{
    build_grid, calibrate, compute_fov, generate_diffuser, simulate_measurement, solve, ConvOperator,
    DiffuserParams, DiffuserSurface, Lattice, NoiseModel, PointSource, PsfStack, RenderOptions, Scene,
    SensorImage, SolverConfig, SystemGeometry, Volume, VolumeGrid,
};
use ndarray::{Array2, Array3, Ix2, Ix3};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::RunConfig;
use crate::container::{ArrayContainer, Semantic};
use crate::error::{CliError, CliResult};

/// Diffuser provenance stored in a heightmap manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct HeightmapParams {
    diffuser: DiffuserParams,
    seed: u64,
    mean_slope_deg: f64,
}

pub fn gen_diffuser(cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    let g = &cfg.geometry;
    let lattice = Lattice::covering(g.aperture_width, g.aperture_height, cfg.diffuser.pitch);
    let surface = generate_diffuser(cfg.seed, &cfg.diffuser, lattice)?;
    let params = HeightmapParams {
        diffuser: cfg.diffuser.clone(),
        seed: cfg.seed,
        mean_slope_deg: surface.mean_slope_deg(),
    };
    ArrayContainer::from_f64(Semantic::Heightmap, "um", surface.heightmap())
        .with_params(serde_json::to_value(params).expect("plain data"))
        .write(out)
}

pub fn load_surface(path: &Path) -> CliResult<DiffuserSurface> {
    let c = ArrayContainer::read_as(path, Semantic::Heightmap)?;
    let params: HeightmapParams = c
        .manifest
        .params
        .clone()
        .and_then(|p| serde_json::from_value(p).ok())
        .ok_or_else(|| CliError::validation(format!("{}: heightmap manifest lacks diffuser params", path.display())))?;
    let h = c.to_f64().into_dimensionality::<Ix2>().expect("validated rank");
    let d = params.diffuser;
    Ok(DiffuserSurface::from_heightmap(h, d.pitch, d.feature_size, d.slope, d.index_contrast, params.seed)?)
}

pub fn calibrate_stack(diffuser: &Path, cfg: &RunConfig, out: &Path) -> CliResult<PathBuf> {
    let surface = load_surface(diffuser)?;
    let grid = cfg.volume_grid()?;
    let opts = RenderOptions { rays: cfg.render.rays, seed: cfg.seed };
    let stack = calibrate(&surface, &grid, &cfg.geometry, opts)?;
    ArrayContainer::from_f64(Semantic::PsfStack, "1/px", &stack.psfs)
        .with_depth_planes(stack.depth_planes.clone())
        .with_geometry(cfg.geometry.clone())
        .with_params(json!({ "rays": opts.rays, "seed": opts.seed }))
        .write(out)
}

/// A calibrated stack with its geometry and reconstruction grid.
pub struct LoadedStack {
    pub stack: PsfStack,
    pub geometry: SystemGeometry,
    pub grid: VolumeGrid,
}

impl LoadedStack {
    pub fn operator(&self) -> CliResult<ConvOperator> {
        Ok(ConvOperator::new(&self.stack)?)
    }
}

pub fn load_stack(path: &Path) -> CliResult<LoadedStack> {
    let c = ArrayContainer::read_as(path, Semantic::PsfStack)?;
    let planes = c.manifest.depth_planes.clone().expect("validated psf_stack");
    let geometry = c
        .manifest
        .geometry
        .clone()
        .ok_or_else(|| CliError::validation(format!("{}: psf_stack manifest lacks geometry", path.display())))?;
    let psfs = c.to_f64().into_dimensionality::<Ix3>().expect("validated rank");
    let (_, ny, nx) = psfs.dim();
    if (ny, nx) != (geometry.sensor_height_px, geometry.sensor_width_px) {
        return Err(CliError::validation(format!(
            "{}: slices are {ny}×{nx} but geometry says {}×{}",
            path.display(),
            geometry.sensor_height_px,
            geometry.sensor_width_px
        )));
    }
    let stack = PsfStack::new(psfs, planes.clone())?;
    let grid = build_grid(&geometry, &planes, (2 * nx, 2 * ny))?;
    Ok(LoadedStack { stack, geometry, grid })
}

/// Reads a scene: a JSON list of `{x, y, z, intensity}` (mm) or a volume container.
pub fn load_scene(path: &Path) -> CliResult<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    if text.trim_start().starts_with('[') {
        let points: Vec<PointSource> =
            serde_json::from_str(&text).map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
        return Ok(Scene::Points(points));
    }
    let c = ArrayContainer::read_as(path, Semantic::Volume)?;
    let v = c.to_f64().into_dimensionality::<Ix3>().expect("validated rank");
    Ok(Scene::Dense(Volume::new(v)))
}

pub fn simulate(scene: &Path, stack: &Path, noise: NoiseModel, seed: u64, out: &Path) -> CliResult<PathBuf> {
    let loaded = load_stack(stack)?;
    let op = loaded.operator()?;
    let scene = load_scene(scene)?;
    if let Scene::Dense(v) = &scene {
        if v.dim() != op.volume_shape() {
            let (a, b) = (op.volume_shape(), v.dim());
            return Err(CliError::validation(format!(
                "scene volume {b:?} does not match the operator lattice {a:?}"
            )));
        }
    }
    let fov = compute_fov(&loaded.geometry)?;
    let b = simulate_measurement(&scene, &op, &loaded.grid, Some(&fov), noise, seed)?;
    ArrayContainer::from_f64(Semantic::SensorImage, "1", &b.data)
        .with_geometry(loaded.geometry)
        .with_params(json!({ "noise": noise, "seed": seed }))
        .write(out)
}

/// Outputs of a reconstruction.
pub struct Reconstruction {
    pub volume: PathBuf,
    pub trace: PathBuf,
    pub png: PathBuf,
    pub converged: bool,
    pub iterations: usize,
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let (json, _) = crate::container::container_paths(out);
    let stem = json.with_extension("");
    let mut s = stem.into_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn load_measurement(path: &Path) -> CliResult<SensorImage> {
    let c = ArrayContainer::read_as(path, Semantic::SensorImage)?;
    Ok(SensorImage::new(c.to_f64().into_dimensionality::<Ix2>().expect("validated rank")))
}

pub fn reconstruct(measurement: &Path, stack: &Path, solver: &SolverConfig, out: &Path) -> CliResult<Reconstruction> {
    let loaded = load_stack(stack)?;
    let op = loaded.operator()?;
    let b = load_measurement(measurement)?;
    if b.dim() != op.sensor_shape() {
        return Err(CliError::validation(format!(
            "measurement is {:?} but the stack expects {:?}",
            b.dim(),
            op.sensor_shape()
        )));
    }
    let sol = solve(&b, &op, solver)?;
    let volume = ArrayContainer::from_f64(Semantic::Volume, "1", &sol.volume.data)
        .with_depth_planes(loaded.stack.depth_planes.clone())
        .with_geometry(loaded.geometry.clone())
        .with_params(json!({
            "lambda": sol.lambda,
            "iterations": sol.iterations,
            "converged": sol.converged,
            "solver": solver,
        }))
        .write(out)?;
    let trace = sibling(out, "_trace.csv");
    let file = File::create(&trace).map_err(|e| CliError::io(&trace, e))?;
    let mut w = BufWriter::new(file);
    sol.trace.write_csv(&mut w).map_err(|e| CliError::io(&trace, e))?;
    w.flush().map_err(|e| CliError::io(&trace, e))?;
    let png = sibling(out, "_mip.png");
    write_png(&sol.volume.max_projection(), &png)?;
    Ok(Reconstruction { volume, trace, png, converged: sol.converged, iterations: sol.iterations })
}

/// 8-bit grayscale export scaled so the maximum maps to 255.
pub fn write_png(img: &Array2<f64>, path: &Path) -> CliResult<()> {
    let (h, w) = img.dim();
    let max = img.iter().copied().fold(0.0, f64::max);
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    let bytes: Vec<u8> = img.iter().map(|&v| (v.max(0.0) * scale).round().min(255.0) as u8).collect();
    let buf = image::GrayImage::from_raw(w as u32, h as u32, bytes).expect("buffer sized to image");
    buf.save(path).map_err(|e| CliError::io(path, e))
}

fn csv_writer(out: Option<&Path>) -> CliResult<csv::Writer<Box<dyn Write>>> {
    let sink: Box<dyn Write> = match out {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| CliError::io(p, e))?)),
        None => Box::new(std::io::stdout()),
    };
    Ok(csv::Writer::from_writer(sink))
}

fn write_rows<T: Serialize>(rows: &[T], out: Option<&Path>) -> CliResult<()> {
    let place = out.unwrap_or(Path::new("<stdout>"));
    let mut w = csv_writer(out)?;
    for r in rows {
        w.serialize(r).map_err(|e| CliError::io(place, e))?;
    }
    w.flush().map_err(|e| CliError::io(place, e))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct FovRow {
    pub axis: String,
    pub half_angle_deg: f64,
    pub limiting: String,
    pub z_min_mm: f64,
    pub z_max_mm: f64,
}

pub fn analyze_fov(geometry: &SystemGeometry, out: Option<&Path>) -> CliResult<Vec<FovRow>> {
    let f = compute_fov(geometry)?;
    let limit = |l| serde_json::to_value(l).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    let rows = vec![
        FovRow {
            axis: "x".into(),
            half_angle_deg: f.x.half_angle,
            limiting: limit(f.x.limiting),
            z_min_mm: f.axial_range.0,
            z_max_mm: f.axial_range.1,
        },
        FovRow {
            axis: "y".into(),
            half_angle_deg: f.y.half_angle,
            limiting: limit(f.y.limiting),
            z_min_mm: f.axial_range.0,
            z_max_mm: f.axial_range.1,
        },
    ];
    write_rows(&rows, out)?;
    Ok(rows)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ResolvabilityRow {
    pub n_sources: usize,
    pub separation_vox: usize,
    pub separation_um: Option<f64>,
    pub separation_mm: Option<f64>,
    pub resolved: bool,
    pub dip: Option<f64>,
    pub diagnostic: Option<String>,
}

pub fn analyze_two_point(
    stack: &Path,
    plane: usize,
    axis: SeparationAxis,
    separations: &[usize],
    solver: &SolverConfig,
    out: Option<&Path>,
) -> CliResult<Vec<ResolvabilityRow>> {
    let loaded = load_stack(stack)?;
    let op = loaded.operator()?;
    let mut rows = Vec::with_capacity(separations.len());
    for &s in separations {
        let r = two_point_test(&op, &loaded.grid, plane, axis, s, solver)?;
        rows.push(ResolvabilityRow {
            n_sources: r.n_sources,
            separation_vox: r.separation,
            separation_um: r.separation_um,
            separation_mm: r.separation_mm,
            resolved: r.resolved,
            dip: r.dip_fraction,
            diagnostic: r.diagnostic,
        });
    }
    write_rows(&rows, out)?;
    Ok(rows)
}

#[allow(clippy::too_many_arguments)]
pub fn analyze_multi_point(
    stack: &Path,
    plane: usize,
    layout: Plane,
    side: usize,
    spacings: &[usize],
    axial_spacing: usize,
    solver: &SolverConfig,
    out: Option<&Path>,
) -> CliResult<Vec<ResolvabilityRow>> {
    let loaded = load_stack(stack)?;
    let op = loaded.operator()?;
    let mut rows = Vec::with_capacity(spacings.len());
    for &s in spacings {
        let r = multi_point_test(&op, &loaded.grid, plane, layout, side, s, axial_spacing, solver)?;
        rows.push(ResolvabilityRow {
            n_sources: r.n_sources,
            separation_vox: r.separation,
            separation_um: r.separation_um,
            separation_mm: r.separation_mm,
            resolved: r.resolved,
            dip: r.dip_fraction,
            diagnostic: r.diagnostic,
        });
    }
    write_rows(&rows, out)?;
    Ok(rows)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ConditioningRow {
    pub n_sources: usize,
    pub depth_mm: f64,
    pub separation_vox: usize,
    pub condition_number: f64,
    pub rank_deficient: bool,
}

pub fn analyze_conditioning(
    stack: &Path,
    plane: usize,
    layout: Plane,
    n_sources: &[usize],
    separations: &[usize],
    out: Option<&Path>,
) -> CliResult<Vec<ConditioningRow>> {
    let loaded = load_stack(stack)?;
    let op = loaded.operator()?;
    let curves = conditioning_sweep(&op, &loaded.grid, plane, layout, n_sources, separations)?;
    let mut rows = Vec::new();
    for c in &curves {
        for i in 0..c.separations.len() {
            rows.push(ConditioningRow {
                n_sources: c.n_sources,
                depth_mm: c.depth_mm,
                separation_vox: c.separations[i],
                condition_number: c.condition_numbers[i],
                rank_deficient: c.rank_deficient[i],
            });
        }
    }
    write_rows(&rows, out)?;
    Ok(rows)
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct SimilarityRow {
    pub field_angle_deg: f64,
    pub x_mm: f64,
    pub z_mm: f64,
    pub inner_product: f64,
    pub spot_ratio: f64,
}

/// Renders the on-axis PSF at depth `z` and off-axis PSFs at each field angle
/// along x, then compares each with the on-axis one.
pub fn analyze_psf_similarity(
    diffuser: &Path,
    cfg: &RunConfig,
    z: f64,
    angles_deg: &[f64],
    out: Option<&Path>,
) -> CliResult<Vec<SimilarityRow>> {
    let surface = load_surface(diffuser)?;
    let opts = RenderOptions { rays: cfg.render.rays, seed: cfg.seed };
    let on_axis = render_psf_at(&surface, (0.0, 0.0, z), &cfg.geometry, opts)?;
    let mut rows = Vec::with_capacity(angles_deg.len());
    for &a in angles_deg {
        let x = z * a.to_radians().tan();
        let off = render_psf_at(&surface, (x, 0.0, z), &cfg.geometry, opts)?;
        let s = psf_similarity(&on_axis, &off)?;
        rows.push(SimilarityRow {
            field_angle_deg: a,
            x_mm: x,
            z_mm: z,
            inner_product: s.inner_product,
            spot_ratio: s.spot_ratio,
        });
    }
    write_rows(&rows, out)?;
    Ok(rows)
}

/// Volume container for a dense scene on the lattice of `stack`, all zero but
/// for the given voxels. Useful for building simulation inputs.
pub fn volume_from_voxels(stack: &LoadedStack, voxels: &[(usize, usize, usize, f64)]) -> ArrayContainer {
    let (nz, ny, nx) = stack.stack.psfs.dim();
    let mut v = Array3::zeros((nz, 2 * ny, 2 * nx));
    for &(k, r, c, w) in voxels {
        v[(k, r, c)] = w;
    }
    ArrayContainer::from_f64(Semantic::Volume, "1", &v).with_depth_planes(stack.stack.depth_planes.clone())
}
