//! System characterization: two-point and multi-point resolvability, local
//! condition numbers of column sub-blocks of `A`, and PSF similarity.
//!
//! Source positions are voxel indices on the padded lattice `(k, row, col)`.

use nalgebra::DMatrix;
use ndarray::{Array2, Axis as NdAxis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fft::{Direction, FftPlan};
use crate::forward::{ConvOperator, SensorImage, Volume, Voxel};
use crate::grid::VolumeGrid;
use crate::solver::{solve, SolverConfig};

/// Minimum relative dip between two adjacent peaks for them to count as resolved.
pub const DIP_THRESHOLD: f64 = 0.2;

/// Direction along which two sources are separated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeparationAxis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for SeparationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Self::X),
            "y" => Ok(Self::Y),
            "z" => Ok(Self::Z),
            _ => Err(invalid("axis", format!("expected x, y or z, got `{s}`"))),
        }
    }
}

/// Plane holding a square constellation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Xy,
    Xz,
}

impl std::str::FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xy" => Ok(Self::Xy),
            "xz" => Ok(Self::Xz),
            _ => Err(invalid("plane", format!("expected xy or xz, got `{s}`"))),
        }
    }
}

/// Outcome of a resolvability experiment.
#[derive(Clone, Debug)]
pub struct ResolvabilityResult {
    /// Separation in voxels (lateral samples or depth planes).
    pub separation: usize,
    /// Physical lateral separation in µm, for lateral or in-plane spacings.
    pub separation_um: Option<f64>,
    /// Physical axial separation in mm, for depth spacings.
    pub separation_mm: Option<f64>,
    pub n_sources: usize,
    pub resolved: bool,
    /// Smallest dip over all adjacent pairs; `None` when no peaks were found.
    pub dip_fraction: Option<f64>,
    pub diagnostic: Option<String>,
    pub sources: Vec<(usize, usize, usize)>,
    pub reconstruction: Volume,
}

/// Condition numbers over a separation sweep for one constellation size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningCurve {
    pub n_sources: usize,
    pub depth_mm: f64,
    pub separations: Vec<usize>,
    pub condition_numbers: Vec<f64>,
    pub rank_deficient: Vec<bool>,
}

/// Condition number of a column block; infinite when rank deficient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionNumber {
    pub value: f64,
    pub rank_deficient: bool,
}

/// Normalized inner product and spot-size ratio between two PSFs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PsfSimilarity {
    pub inner_product: f64,
    pub spot_ratio: f64,
}

fn check_in_view(op: &ConvOperator, sources: &[(usize, usize, usize)]) -> Result<()> {
    let (nz, _, _) = op.volume_shape();
    let (ny, nx) = op.sensor_shape();
    let (oy, ox) = op.crop_offset();
    let outside: Vec<usize> = sources
        .iter()
        .enumerate()
        .filter(|(_, &(k, r, c))| k >= nz || r < oy || r >= oy + ny || c < ox || c >= ox + nx)
        .map(|(i, _)| i)
        .collect();
    if outside.is_empty() {
        Ok(())
    } else {
        Err(Error::SourcesOutsideFov { indices: outside })
    }
}

/// Relative dip of the profile between two sources, or `None` when either
/// peak is not positive. Adjacent sources have no valley and give zero.
pub fn dip_between(x: &Volume, a: (usize, usize, usize), b: (usize, usize, usize)) -> Option<f64> {
    let d = &x.data;
    let pa = d[a];
    let pb = d[b];
    let peak = pa.min(pb);
    if !(peak > 0.0) {
        return None;
    }
    let steps = [
        a.0.abs_diff(b.0),
        a.1.abs_diff(b.1),
        a.2.abs_diff(b.2),
    ]
    .into_iter()
    .max()
    .unwrap_or(0);
    if steps < 2 {
        return Some(0.0);
    }
    let lerp = |p: usize, q: usize, t: f64| (p as f64 + (q as f64 - p as f64) * t).round() as usize;
    let mut valley = f64::INFINITY;
    for i in 1..steps {
        let t = i as f64 / steps as f64;
        let v = d[(lerp(a.0, b.0, t), lerp(a.1, b.1, t), lerp(a.2, b.2, t))];
        valley = valley.min(v);
    }
    Some(((peak - valley) / peak).clamp(0.0, 1.0))
}

/// Simulates the sum of unit single-source measurements, reconstructs with
/// λ = 0 and applies the dip criterion to every listed pair.
fn resolve_constellation(
    op: &ConvOperator,
    sources: &[(usize, usize, usize)],
    pairs: &[(usize, usize)],
    config: &SolverConfig,
) -> Result<(bool, Option<f64>, Option<String>, Volume)> {
    check_in_view(op, sources)?;
    let (ny, nx) = op.sensor_shape();
    let mut b = Array2::zeros((ny, nx));
    for &(plane, row, col) in sources {
        let single = op.apply_sparse(&[Voxel { plane, row, col, weight: 1.0 }])?;
        b += &single.data;
    }
    let cfg = SolverConfig { lambda: Some(0.0), ..config.clone() };
    let sol = solve(&SensorImage::new(b), op, &cfg)?;
    if pairs.is_empty() {
        return Ok((true, None, None, sol.volume));
    }
    let mut worst = f64::INFINITY;
    for &(i, j) in pairs {
        match dip_between(&sol.volume, sources[i], sources[j]) {
            Some(dip) => worst = worst.min(dip),
            None => {
                let msg = format!("no peak at source {:?} or {:?}", sources[i], sources[j]);
                return Ok((false, None, Some(msg), sol.volume));
            }
        }
    }
    Ok((worst >= DIP_THRESHOLD, Some(worst), None, sol.volume))
}

fn lateral_um(grid: &VolumeGrid, plane: usize, samples: usize) -> f64 {
    grid.lateral_pitch[plane] * samples as f64
}

/// Two unit sources straddling the on-axis voxel of `plane`, `separation`
/// voxels apart along `axis`.
pub fn two_point_test(
    op: &ConvOperator,
    grid: &VolumeGrid,
    plane: usize,
    axis: SeparationAxis,
    separation: usize,
    config: &SolverConfig,
) -> Result<ResolvabilityResult> {
    if plane >= grid.nz() {
        return Err(invalid("plane", format!("{plane} outside {} planes", grid.nz())));
    }
    let (cy, cx) = op.center();
    let half = separation / 2;
    let sources = match axis {
        SeparationAxis::X => vec![(plane, cy, cx - half), (plane, cy, cx - half + separation)],
        SeparationAxis::Y => vec![(plane, cy - half, cx), (plane, cy - half + separation, cx)],
        SeparationAxis::Z => {
            let k0 = plane.checked_sub(half).ok_or_else(|| invalid("separation", "axial pair below plane 0"))?;
            vec![(k0, cy, cx), (k0 + separation, cy, cx)]
        }
    };
    let (separation_um, separation_mm) = match axis {
        SeparationAxis::Z => {
            let (k0, k1) = (sources[0].0, sources[1].0);
            let z = |k: usize| grid.depth_planes.get(k).copied();
            check_in_view(op, &sources)?;
            (None, Some(z(k1).unwrap_or(f64::NAN) - z(k0).unwrap_or(f64::NAN)))
        }
        _ => (Some(lateral_um(grid, plane, separation)), None),
    };
    if separation == 0 {
        check_in_view(op, &sources)?;
        return Ok(ResolvabilityResult {
            separation,
            separation_um,
            separation_mm,
            n_sources: 2,
            resolved: false,
            dip_fraction: None,
            diagnostic: Some("coincident sources".into()),
            sources,
            reconstruction: Volume::zeros(op.volume_shape()),
        });
    }
    let (resolved, dip, diagnostic, reconstruction) = resolve_constellation(op, &sources, &[(0, 1)], config)?;
    Ok(ResolvabilityResult {
        separation,
        separation_um,
        separation_mm,
        n_sources: 2,
        resolved,
        dip_fraction: dip,
        diagnostic,
        sources,
        reconstruction,
    })
}

/// Square `side × side` constellation in `plane`, centered laterally on the
/// optical axis. In the x–z plane rows run over depth from `first_plane`.
pub fn square_constellation(
    op: &ConvOperator,
    first_plane: usize,
    plane: Plane,
    side: usize,
    lateral_spacing: usize,
    axial_spacing: usize,
) -> Vec<(usize, usize, usize)> {
    let (cy, cx) = op.center();
    let span = (side.saturating_sub(1) * lateral_spacing) / 2;
    let mut out = Vec::with_capacity(side * side);
    for i in 0..side {
        for j in 0..side {
            let col = cx - span + j * lateral_spacing;
            out.push(match plane {
                Plane::Xy => (first_plane, cy - span + i * lateral_spacing, col),
                Plane::Xz => (first_plane + i * axial_spacing, cy, col),
            });
        }
    }
    out
}

fn grid_pairs(side: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..side {
        for j in 0..side {
            if j + 1 < side {
                pairs.push((i * side + j, i * side + j + 1));
            }
            if i + 1 < side {
                pairs.push((i * side + j, (i + 1) * side + j));
            }
        }
    }
    pairs
}

/// `side × side` constellation; resolved only when every adjacent pair dips.
#[allow(clippy::too_many_arguments)]
pub fn multi_point_test(
    op: &ConvOperator,
    grid: &VolumeGrid,
    first_plane: usize,
    plane: Plane,
    side: usize,
    lateral_spacing: usize,
    axial_spacing: usize,
    config: &SolverConfig,
) -> Result<ResolvabilityResult> {
    if side == 0 {
        return Err(invalid("side", "constellation must hold at least one source"));
    }
    if side > 1 && (lateral_spacing == 0 || (plane == Plane::Xz && axial_spacing == 0)) {
        return Err(invalid("spacing", "spacing must be positive"));
    }
    if first_plane >= grid.nz() {
        return Err(invalid("plane", format!("{first_plane} outside {} planes", grid.nz())));
    }
    let sources = square_constellation(op, first_plane, plane, side, lateral_spacing, axial_spacing);
    let (resolved, dip, diagnostic, reconstruction) = resolve_constellation(op, &sources, &grid_pairs(side), config)?;
    let separation_mm = match plane {
        Plane::Xz if side > 1 => Some(grid.depth_planes[first_plane + axial_spacing] - grid.depth_planes[first_plane]),
        _ => None,
    };
    Ok(ResolvabilityResult {
        separation: lateral_spacing,
        separation_um: Some(lateral_um(grid, first_plane, lateral_spacing)),
        separation_mm,
        n_sources: side * side,
        resolved,
        dip_fraction: dip,
        diagnostic,
        sources,
        reconstruction,
    })
}

/// Explicit column block of `A` for the given voxels, one flattened
/// single-voxel measurement per column.
pub fn column_block(op: &ConvOperator, voxels: &[(usize, usize, usize)]) -> Result<DMatrix<f64>> {
    let (ny, nx) = op.sensor_shape();
    let cols: Vec<SensorImage> = voxels
        .par_iter()
        .map(|&(plane, row, col)| op.apply_sparse(&[Voxel { plane, row, col, weight: 1.0 }]))
        .collect::<Result<_>>()?;
    Ok(DMatrix::from_fn(ny * nx, voxels.len(), |i, j| cols[j].data[(i / nx, i % nx)]))
}

/// `σ_max / σ_min` of a column block. Zero columns or singular values below
/// the usual `max(m, n)·ε·σ_max` cutoff flag the block as rank deficient.
pub fn condition_of(m: &DMatrix<f64>) -> ConditionNumber {
    let sv = m.singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let tol = m.nrows().max(m.ncols()) as f64 * f64::EPSILON * smax;
    if !(smax > 0.0) || smin <= tol {
        ConditionNumber { value: f64::INFINITY, rank_deficient: true }
    } else {
        ConditionNumber { value: smax / smin, rank_deficient: false }
    }
}

/// Local condition number of the sub-matrix of `A` restricted to `voxels`.
pub fn local_condition_number(op: &ConvOperator, voxels: &[(usize, usize, usize)]) -> Result<ConditionNumber> {
    if voxels.is_empty() {
        return Err(invalid("constellation", "no voxels"));
    }
    let mut seen = voxels.to_vec();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != voxels.len() {
        return Err(invalid("constellation", "voxel indices must be distinct"));
    }
    let (nz, py, px) = op.volume_shape();
    if let Some(v) = voxels.iter().find(|&&(k, r, c)| k >= nz || r >= py || c >= px) {
        return Err(invalid("constellation", format!("voxel {v:?} outside volume {:?}", (nz, py, px))));
    }
    Ok(condition_of(&column_block(op, voxels)?))
}

/// Condition numbers of square constellations of each size in `n_sources`
/// (perfect squares) over integer separations. Every constellation grows
/// from the same corner anchor, so at a given separation larger ones contain
/// the smaller ones.
pub fn conditioning_sweep(
    op: &ConvOperator,
    grid: &VolumeGrid,
    plane_index: usize,
    plane: Plane,
    n_sources: &[usize],
    separations: &[usize],
) -> Result<Vec<ConditioningCurve>> {
    if plane_index >= grid.nz() {
        return Err(invalid("plane", format!("{plane_index} outside {} planes", grid.nz())));
    }
    let sides: Vec<usize> = n_sources
        .iter()
        .map(|&n| {
            let side = (n as f64).sqrt().round() as usize;
            if side * side == n && n > 0 {
                Ok(side)
            } else {
                Err(invalid("n_sources", format!("{n} is not a positive perfect square")))
            }
        })
        .collect::<Result<_>>()?;
    if separations.contains(&0) {
        return Err(invalid("separations", "separations must be positive"));
    }
    // The shared anchor centers the largest constellation on the axis.
    let (cy, cx) = op.center();
    let reach = (sides.iter().max().copied().unwrap_or(1) - 1) * separations.iter().max().copied().unwrap_or(0) / 2;
    let (ay, ax) = (cy.saturating_sub(reach), cx.saturating_sub(reach));
    let constellation = |side: usize, s: usize| -> Vec<(usize, usize, usize)> {
        let mut v = Vec::with_capacity(side * side);
        for i in 0..side {
            for j in 0..side {
                v.push(match plane {
                    Plane::Xy => (plane_index, ay + i * s, ax + j * s),
                    Plane::Xz => (plane_index + i * s, cy, ax + j * s),
                });
            }
        }
        v
    };
    let cells: Vec<(usize, usize)> = (0..sides.len())
        .flat_map(|a| (0..separations.len()).map(move |b| (a, b)))
        .collect();
    let values: Vec<ConditionNumber> = cells
        .par_iter()
        .map(|&(a, b)| {
            let voxels = constellation(sides[a], separations[b]);
            check_in_view(op, &voxels)?;
            local_condition_number(op, &voxels)
        })
        .collect::<Result<_>>()?;
    Ok(sides
        .iter()
        .enumerate()
        .map(|(a, &side)| {
            let row = &values[a * separations.len()..(a + 1) * separations.len()];
            ConditioningCurve {
                n_sources: side * side,
                depth_mm: grid.depth_planes[plane_index],
                separations: separations.to_vec(),
                condition_numbers: row.iter().map(|c| c.value).collect(),
                rank_deficient: row.iter().map(|c| c.rank_deficient).collect(),
            }
        })
        .collect())
}

/// Full linear cross-correlation `c[s] = Σ a[p]·b[p + s]`, returned on a
/// `(2Ny, 2Nx)` lattice with zero shift at index `(0, 0)`.
fn cross_correlation(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (ny, nx) = a.dim();
    let shape = (2 * ny, 2 * nx);
    let plan = FftPlan::new(&[shape.0, shape.1]);
    let lift = |x: &Array2<f64>| {
        let mut out = Array2::<Complex64>::zeros(shape);
        out.slice_mut(ndarray::s![..ny, ..nx]).assign(&x.mapv(|v| Complex64::new(v, 0.0)));
        out
    };
    let mut fa = lift(a);
    let mut fb = lift(b);
    plan.process(fa.view_mut(), Direction::Forward);
    plan.process(fb.view_mut(), Direction::Forward);
    let mut prod = fa.mapv(|v| v.conj()) * fb;
    plan.process(prod.view_mut(), Direction::Inverse);
    prod.mapv(|v| v.re)
}

fn argmax(a: &Array2<f64>) -> (usize, usize) {
    let mut best = (0, 0);
    let mut val = f64::NEG_INFINITY;
    for ((r, c), &v) in a.indexed_iter() {
        if v > val {
            val = v;
            best = (r, c);
        }
    }
    best
}

/// Number of samples in the 4-connected region around `peak` at or above
/// half its value, on a periodic lattice.
fn half_max_area(a: &Array2<f64>, peak: (usize, usize)) -> usize {
    let (ny, nx) = a.dim();
    let half = 0.5 * a[peak];
    let mut seen = Array2::from_elem((ny, nx), false);
    let mut stack = vec![peak];
    seen[peak] = true;
    let mut count = 0;
    while let Some((r, c)) = stack.pop() {
        count += 1;
        for (dr, dc) in [(1, 0), (ny - 1, 0), (0, 1), (0, nx - 1)] {
            let q = ((r + dr) % ny, (c + dc) % nx);
            if !seen[q] && a[q] >= half {
                seen[q] = true;
                stack.push(q);
            }
        }
    }
    count
}

fn centered(a: &Array2<f64>) -> Array2<f64> {
    let m = a.mean().unwrap_or(0.0);
    a.mapv(|v| v - m)
}

/// Compares an off-axis PSF with the reference after registering it at its
/// cross-correlation peak.
///
/// The inner product is `⟨a, shift(b)⟩ / (‖a‖‖b‖)`. The spot ratio is the
/// width of the mean-removed cross-correlation peak over that of the
/// reference autocorrelation, each measured as the root of the half-maximum
/// area.
pub fn psf_similarity(reference: &Array2<f64>, off_axis: &Array2<f64>) -> Result<PsfSimilarity> {
    if reference.dim() != off_axis.dim() {
        let (a, b) = (reference.dim(), off_axis.dim());
        return Err(Error::ShapeMismatch { expected: vec![a.0, a.1], actual: vec![b.0, b.1] });
    }
    let na = reference.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = off_axis.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(na > 0.0) || !(nb > 0.0) {
        return Err(invalid("psf", "zero-energy input"));
    }
    let xc = cross_correlation(reference, off_axis);
    let inner_product = (xc[argmax(&xc)] / (na * nb)).clamp(-1.0, 1.0);

    let ra = centered(reference);
    let rb = centered(off_axis);
    let auto = cross_correlation(&ra, &ra);
    let cross = cross_correlation(&ra, &rb);
    let w_auto = (half_max_area(&auto, argmax(&auto)) as f64).sqrt();
    let w_cross = (half_max_area(&cross, argmax(&cross)) as f64).sqrt();
    Ok(PsfSimilarity { inner_product, spot_ratio: w_cross / w_auto })
}

/// Maximum-intensity projection of a reconstruction along depth.
pub fn depth_projection(x: &Volume) -> Array2<f64> {
    x.data.fold_axis(NdAxis(0), f64::NEG_INFINITY, |&a, &b| a.max(b))
}
