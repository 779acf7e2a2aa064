//! System geometry, field of view and the non-uniform reconstruction lattice.
//!
//! Lengths follow the units named in each field: sensor pitch in µm, all
//! optical distances in mm, angles in degrees.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Physical layout of a diffuser-in-front-of-sensor camera.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemGeometry {
    pub sensor_width_px: usize,
    pub sensor_height_px: usize,
    /// µm
    pub pixel_pitch: f64,
    /// mm
    pub diffuser_to_sensor_d: f64,
    /// mm, along x
    pub aperture_width: f64,
    /// mm, along y
    pub aperture_height: f64,
    /// deg
    pub diffuser_max_deflection_beta: f64,
    /// deg
    pub pixel_cutoff_alpha_c_x: f64,
    /// deg
    pub pixel_cutoff_alpha_c_y: f64,
    /// mm
    pub min_object_distance: f64,
    /// mm
    pub hyperfocal_distance: f64,
}

impl Default for SystemGeometry {
    fn default() -> Self {
        Self::prototype()
    }
}

impl SystemGeometry {
    /// Full-size prototype: 2560×2160 sensor of 6.5 µm pixels, 8.9 mm gap,
    /// 7.5×5.5 mm aperture, 0.5° diffuser, 41.5°/30° pixel acceptance.
    pub fn prototype() -> Self {
        Self {
            sensor_width_px: 2560,
            sensor_height_px: 2160,
            pixel_pitch: 6.5,
            diffuser_to_sensor_d: 8.9,
            aperture_width: 7.5,
            aperture_height: 5.5,
            diffuser_max_deflection_beta: 0.5,
            pixel_cutoff_alpha_c_x: 41.5,
            pixel_cutoff_alpha_c_y: 30.0,
            min_object_distance: 7.3,
            hyperfocal_distance: 2300.0,
        }
    }

    /// Laptop-sized analogue of the prototype: same pitch, gap and angles, with
    /// a 256×256 sensor and an aperture shrunk so the closest calibrated PSF
    /// (10.86 mm) roughly fills the sensor.
    pub fn desk() -> Self {
        Self {
            sensor_width_px: 256,
            sensor_height_px: 256,
            aperture_width: 0.95,
            aperture_height: 0.95,
            ..Self::prototype()
        }
    }

    /// Sensor extent along x in mm.
    pub fn sensor_width_mm(&self) -> f64 {
        self.sensor_width_px as f64 * self.pixel_pitch * 1e-3
    }

    /// Sensor extent along y in mm.
    pub fn sensor_height_mm(&self) -> f64 {
        self.sensor_height_px as f64 * self.pixel_pitch * 1e-3
    }

    pub fn validate(&self) -> Result<()> {
        if self.sensor_width_px == 0 {
            return Err(invalid("sensor_width_px", "must be > 0"));
        }
        if self.sensor_height_px == 0 {
            return Err(invalid("sensor_height_px", "must be > 0"));
        }
        let lengths = [
            ("pixel_pitch", self.pixel_pitch),
            ("diffuser_to_sensor_d", self.diffuser_to_sensor_d),
            ("aperture_width", self.aperture_width),
            ("aperture_height", self.aperture_height),
            ("min_object_distance", self.min_object_distance),
            ("hyperfocal_distance", self.hyperfocal_distance),
        ];
        for (field, v) in lengths {
            if !(v.is_finite() && v > 0.0) {
                return Err(invalid(field, format!("length must be > 0, got {v}")));
            }
        }
        let angles = [
            ("diffuser_max_deflection_beta", self.diffuser_max_deflection_beta),
            ("pixel_cutoff_alpha_c_x", self.pixel_cutoff_alpha_c_x),
            ("pixel_cutoff_alpha_c_y", self.pixel_cutoff_alpha_c_y),
        ];
        for (field, v) in angles {
            if !(v > 0.0 && v < 90.0) {
                return Err(invalid(field, format!("angle must lie in (0°, 90°), got {v}")));
            }
        }
        if self.min_object_distance >= self.hyperfocal_distance {
            return Err(invalid(
                "min_object_distance",
                "must be smaller than hyperfocal_distance",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FovLimit {
    Geometric,
    PixelResponse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisFov {
    /// deg
    pub half_angle: f64,
    pub limiting: FovLimit,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FovReport {
    pub x: AxisFov,
    pub y: AxisFov,
    /// (z_min, z_max) in mm
    pub axial_range: (f64, f64),
}

/// Half-angle field of view along one axis: `β + min(α_c, atan((l + w) / 2d))`.
pub fn axis_half_fov(sensor_mm: f64, aperture_mm: f64, d_mm: f64, alpha_c: f64, beta: f64) -> AxisFov {
    let geometric = ((sensor_mm + aperture_mm) / (2.0 * d_mm)).atan().to_degrees();
    // Ties go to the geometric limit.
    let (limit, limiting) = if alpha_c < geometric {
        (alpha_c, FovLimit::PixelResponse)
    } else {
        (geometric, FovLimit::Geometric)
    };
    AxisFov {
        half_angle: beta + limit,
        limiting,
    }
}

pub fn compute_fov(geom: &SystemGeometry) -> Result<FovReport> {
    geom.validate()?;
    let d = geom.diffuser_to_sensor_d;
    let beta = geom.diffuser_max_deflection_beta;
    Ok(FovReport {
        x: axis_half_fov(geom.sensor_width_mm(), geom.aperture_width, d, geom.pixel_cutoff_alpha_c_x, beta),
        y: axis_half_fov(geom.sensor_height_mm(), geom.aperture_height, d, geom.pixel_cutoff_alpha_c_y, beta),
        axial_range: (geom.min_object_distance, geom.hyperfocal_distance),
    })
}

/// Depth planes with constant inverse-depth step `c` (mm⁻¹), starting at
/// `z_min` and stopping before `z_max` is exceeded.
pub fn depth_plane_spacing(z_min: f64, z_max: f64, c: f64) -> Result<Vec<f64>> {
    if !(z_min.is_finite() && z_min > 0.0) {
        return Err(invalid("z_min", "must be > 0"));
    }
    if !(z_max.is_finite() && z_max >= z_min) {
        return Err(invalid("z_max", "must be >= z_min"));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(invalid("c", "must be > 0"));
    }
    let inv_min = 1.0 / z_min;
    if c >= inv_min {
        return Err(invalid("c", format!("must be < 1/z_min = {inv_min}")));
    }
    // Inclusion slack absorbs rounding when z_max sits exactly on the lattice.
    let limit = z_max * (1.0 + 1e-12);
    let mut planes = vec![z_min];
    let mut inv = inv_min;
    loop {
        let next_inv = inv - c;
        if next_inv <= 0.0 {
            break;
        }
        let z = 1.0 / next_inv;
        if z > limit {
            break;
        }
        planes.push(z);
        inv = 1.0 / z;
    }
    Ok(planes)
}

/// The inverse-depth step giving exactly `n` planes between the endpoints.
pub fn spacing_for_count(z_min: f64, z_max: f64, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(invalid("n", "need at least two planes to derive a spacing"));
    }
    if !(z_min > 0.0 && z_max > z_min) {
        return Err(invalid("z_max", "must exceed z_min > 0"));
    }
    Ok((1.0 / z_min - 1.0 / z_max) / (n - 1) as f64)
}

/// `n` planes between `z_min` and `z_max` with uniform inverse-depth spacing.
pub fn depth_planes_between(z_min: f64, z_max: f64, n: usize) -> Result<Vec<f64>> {
    if n == 1 {
        if !(z_min > 0.0) {
            return Err(invalid("z_min", "must be > 0"));
        }
        return Ok(vec![z_min]);
    }
    let c = spacing_for_count(z_min, z_max, n)?;
    let mut planes = depth_plane_spacing(z_min, z_max, c)?;
    planes.truncate(n);
    Ok(planes)
}

/// Paraxial magnification between a lateral source shift at depth `z` and
/// the resulting caustic shift on the sensor, modeled as pinhole projection
/// through the diffuser plane: `m = d / z`.
pub fn magnification(z: f64, geom: &SystemGeometry) -> Result<f64> {
    if !(z.is_finite() && z > 0.0) {
        return Err(invalid("z", format!("depth must be > 0, got {z}")));
    }
    Ok(geom.diffuser_to_sensor_d / z)
}

/// Reconstruction lattice: shared lateral counts, one pitch per depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeGrid {
    pub depth_planes: Vec<f64>,
    /// (Nx, Ny)
    pub lateral_counts: (usize, usize),
    pub magnification: Vec<f64>,
    /// Lateral voxel pitch per plane, µm.
    pub lateral_pitch: Vec<f64>,
}

impl VolumeGrid {
    pub fn nz(&self) -> usize {
        self.depth_planes.len()
    }

    pub fn nx(&self) -> usize {
        self.lateral_counts.0
    }

    pub fn ny(&self) -> usize {
        self.lateral_counts.1
    }

    /// Array shape (Nz, Ny, Nx) used by every volume on this grid.
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.nz(), self.ny(), self.nx())
    }

    pub fn voxel_count(&self) -> u64 {
        self.nz() as u64 * self.ny() as u64 * self.nx() as u64
    }

    /// Index of the on-axis voxel in each lateral dimension, (row, col).
    pub fn center(&self) -> (usize, usize) {
        (self.ny() / 2, self.nx() / 2)
    }

    /// Physical lateral position (mm) of voxel column/row `index` at plane `k`.
    pub fn lateral_position(&self, k: usize, index: usize, center: usize) -> f64 {
        (index as f64 - center as f64) * self.lateral_pitch[k] * 1e-3
    }

    /// Closest depth plane to `z`.
    pub fn nearest_plane(&self, z: f64) -> usize {
        let mut best = 0;
        for (k, &zk) in self.depth_planes.iter().enumerate() {
            if (zk - z).abs() < (self.depth_planes[best] - z).abs() {
                best = k;
            }
        }
        best
    }
}

pub fn build_grid(geom: &SystemGeometry, z_planes: &[f64], lateral_counts: (usize, usize)) -> Result<VolumeGrid> {
    geom.validate()?;
    if z_planes.is_empty() {
        return Err(invalid("z_planes", "need at least one depth plane"));
    }
    if lateral_counts.0 == 0 || lateral_counts.1 == 0 {
        return Err(invalid("lateral_counts", "counts must be > 0"));
    }
    if z_planes.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("z_planes", "depth planes must be strictly increasing"));
    }
    let outside: Vec<f64> = z_planes
        .iter()
        .copied()
        .filter(|&z| !(z >= geom.min_object_distance && z <= geom.hyperfocal_distance))
        .collect();
    if !outside.is_empty() {
        return Err(Error::PlanesOutsideFov { planes: outside });
    }
    let magnification = z_planes
        .iter()
        .map(|&z| magnification(z, geom))
        .collect::<Result<Vec<_>>>()?;
    let lateral_pitch = magnification.iter().map(|m| geom.pixel_pitch / m).collect();
    Ok(VolumeGrid {
        depth_planes: z_planes.to_vec(),
        lateral_counts,
        magnification,
        lateral_pitch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prototype_fov_matches_reported_angles() {
        let fov = compute_fov(&SystemGeometry::prototype()).unwrap();
        assert!((fov.x.half_angle - 42.0).abs() < 0.05);
        assert!((fov.y.half_angle - 30.5).abs() < 0.05);
        assert_eq!(fov.x.limiting, FovLimit::PixelResponse);
        assert_eq!(fov.y.limiting, FovLimit::PixelResponse);
        assert_eq!(fov.axial_range, (7.3, 2300.0));
    }

    #[test]
    fn geometric_limit_at_45_degrees() {
        let f = axis_half_fov(10.0, 8.0, 9.0, 90.0, 0.0);
        assert!((f.half_angle - 45.0).abs() < 1e-12);
        assert_eq!(f.limiting, FovLimit::Geometric);
    }

    #[test]
    fn invalid_geometry_names_field() {
        let mut g = SystemGeometry::prototype();
        g.pixel_cutoff_alpha_c_y = 95.0;
        match compute_fov(&g) {
            Err(Error::InvalidParameter { field, .. }) => assert_eq!(field, "pixel_cutoff_alpha_c_y"),
            other => panic!("unexpected {other:?}"),
        }
        let mut g = SystemGeometry::prototype();
        g.min_object_distance = 3000.0;
        assert!(matches!(
            compute_fov(&g),
            Err(Error::InvalidParameter { field: "min_object_distance", .. })
        ));
        let mut g = SystemGeometry::prototype();
        g.aperture_width = -1.0;
        assert!(matches!(
            g.validate(),
            Err(Error::InvalidParameter { field: "aperture_width", .. })
        ));
    }

    #[test]
    fn spacing_recurrence() {
        let z = depth_plane_spacing(10.0, 12.0, 0.01).unwrap();
        assert!((z[1] - 1.0 / 0.09).abs() < 1e-12);
        assert_eq!(depth_plane_spacing(10.0, 10.0, 0.05).unwrap(), vec![10.0]);
        assert!(depth_plane_spacing(10.0, 20.0, 0.1).is_err());
        assert!(depth_plane_spacing(10.0, 20.0, 0.2).is_err());
    }

    #[test]
    fn magnification_values() {
        let g = SystemGeometry::prototype();
        assert_eq!(magnification(8.9, &g).unwrap(), 1.0);
        assert!((magnification(17.8, &g).unwrap() - 0.5).abs() < 1e-15);
        assert!(magnification(0.0, &g).is_err());
        assert!(magnification(10.0, &g).unwrap() > magnification(11.0, &g).unwrap());
    }

    #[test]
    fn grid_sizes_and_pitch() {
        let g = SystemGeometry::prototype();
        let planes = depth_planes_between(10.86, 36.26, 128).unwrap();
        let grid = build_grid(&g, &planes, (2048, 2048)).unwrap();
        assert_eq!(grid.voxel_count(), 2048 * 2048 * 128);
        assert_eq!(grid.voxel_count() / 1_000_000, 536);
        assert_eq!((grid.voxel_count() as f64 / 1e6).round(), 537.0);

        let one = build_grid(&g, &[20.0], (1, 1)).unwrap();
        assert_eq!(one.voxel_count(), 1);

        let near_far = build_grid(&g, &[8.9, 17.8], (4, 4)).unwrap();
        assert!((near_far.lateral_pitch[1] / near_far.lateral_pitch[0] - 2.0).abs() < 1e-12);
        assert!((near_far.lateral_pitch[0] - 6.5).abs() < 1e-12);
    }

    #[test]
    fn grid_rejects_planes_outside_axial_range() {
        let g = SystemGeometry::prototype();
        match build_grid(&g, &[5.0, 10.0, 3000.0], (2, 2)) {
            Err(Error::PlanesOutsideFov { planes }) => assert_eq!(planes, vec![5.0, 3000.0]),
            other => panic!("unexpected {other:?}"),
        }
        assert!(build_grid(&g, &[10.0, 9.0], (2, 2)).is_err());
    }
}
