//! Cropped-convolution measurement operator `A = D·M` and the sparsifying
//! transform Ψ.
//!
//! Layout conventions used throughout the crate:
//!
//! * a sensor image is `(Ny, Nx)`;
//! * the padded lattice is `(Py, Px) = (2Ny, 2Nx)`, with the sensor window at
//!   rows `Ny/2 .. Ny/2 + Ny` and columns `Nx/2 .. Nx/2 + Nx`;
//! * a volume lives on the padded lattice, `(Nz, Py, Px)`, and its on-axis
//!   voxel is `(Py/2, Px/2)`;
//! * moving a voxel by `+j` lateral samples moves its caustic by `-j` sensor
//!   pixels (image inversion through the diffuser plane), so volumes are
//!   stored upright in object coordinates.
//!
//! The depth sum is realized as slice 0 of a circular 3D convolution with the
//! z-reversed kernel stack. [`ConvOperator::apply`] evaluates that slice
//! directly as a sum of 2D spectral products; the solver uses the full 3D
//! circulant `M`, whose Gram matrix is diagonal in 3D frequency space.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, Axis, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fft::{negate_index, to_complex3, Direction, FftPlan};
use crate::optics::PsfStack;

/// 2D nonnegative measurement on the sensor lattice, `(Ny, Nx)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorImage {
    pub data: Array2<f64>,
    /// Free-form acquisition note (noise model, binning, ...).
    pub exposure: Option<String>,
}

impl SensorImage {
    pub fn new(data: Array2<f64>) -> Self {
        Self { data, exposure: None }
    }

    pub fn zeros(ny: usize, nx: usize) -> Self {
        Self::new(Array2::zeros((ny, nx)))
    }

    pub fn dim(&self) -> (usize, usize) {
        self.data.dim()
    }
}

/// 3D intensity on the reconstruction lattice, `(Nz, Py, Px)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub data: Array3<f64>,
}

impl Volume {
    pub fn new(data: Array3<f64>) -> Self {
        Self { data }
    }

    pub fn zeros(shape: (usize, usize, usize)) -> Self {
        Self::new(Array3::zeros(shape))
    }

    pub fn dim(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    /// Maximum intensity projection along depth, `(Py, Px)`.
    pub fn max_projection(&self) -> Array2<f64> {
        self.data
            .map_axis(Axis(0), |lane| lane.iter().copied().fold(f64::NEG_INFINITY, f64::max))
    }
}

/// A single weighted voxel `(plane, row, col, weight)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Voxel {
    pub plane: usize,
    pub row: usize,
    pub col: usize,
    pub weight: f64,
}

/// Sparsifying transform used by the regularizer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularizer {
    /// Native sparsity, Ψ = I.
    #[default]
    Identity,
    /// Circular forward differences with per-voxel vector shrinkage.
    Tv3d,
    /// Same differences, shrunk component-wise.
    Tv3dAniso,
}

impl Regularizer {
    pub fn components(self) -> usize {
        match self {
            Regularizer::Identity => 1,
            Regularizer::Tv3d | Regularizer::Tv3dAniso => 3,
        }
    }

    pub fn is_vectorial(self) -> bool {
        matches!(self, Regularizer::Tv3d)
    }
}

impl std::str::FromStr for Regularizer {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "identity" | "native" => Ok(Regularizer::Identity),
            "tv3d" | "tv" => Ok(Regularizer::Tv3d),
            "tv3d-aniso" | "tv-aniso" => Ok(Regularizer::Tv3dAniso),
            other => Err(format!("unknown regularizer `{other}` (identity, tv3d, tv3d-aniso)")),
        }
    }
}

/// Ψx: `(components, Nz, Py, Px)`. TV components are ordered (x, y, z).
pub fn psi_apply(x: &Array3<f64>, mode: Regularizer) -> Array4<f64> {
    let (nz, ny, nx) = x.dim();
    match mode {
        Regularizer::Identity => x.clone().insert_axis(Axis(0)),
        Regularizer::Tv3d | Regularizer::Tv3dAniso => {
            let mut g = Array4::zeros((3, nz, ny, nx));
            Zip::indexed(g.index_axis_mut(Axis(0), 0)).par_for_each(|(k, i, j), o| {
                *o = x[(k, i, (j + 1) % nx)] - x[(k, i, j)];
            });
            Zip::indexed(g.index_axis_mut(Axis(0), 1)).par_for_each(|(k, i, j), o| {
                *o = x[(k, (i + 1) % ny, j)] - x[(k, i, j)];
            });
            Zip::indexed(g.index_axis_mut(Axis(0), 2)).par_for_each(|(k, i, j), o| {
                *o = x[((k + 1) % nz, i, j)] - x[(k, i, j)];
            });
            g
        }
    }
}

/// Ψᵀg; for TV this is the negative circular backward-difference divergence.
pub fn psi_adjoint(g: &Array4<f64>, mode: Regularizer) -> Array3<f64> {
    let (_, nz, ny, nx) = g.dim();
    match mode {
        Regularizer::Identity => g.index_axis(Axis(0), 0).to_owned(),
        Regularizer::Tv3d | Regularizer::Tv3dAniso => {
            let gx = g.index_axis(Axis(0), 0);
            let gy = g.index_axis(Axis(0), 1);
            let gz = g.index_axis(Axis(0), 2);
            let mut out = Array3::zeros((nz, ny, nx));
            Zip::indexed(&mut out).par_for_each(|(k, i, j), o| {
                *o = gx[(k, i, (j + nx - 1) % nx)] - gx[(k, i, j)] + gy[(k, (i + ny - 1) % ny, j)] - gy[(k, i, j)]
                    + gz[((k + nz - 1) % nz, i, j)]
                    - gz[(k, i, j)];
            });
            out
        }
    }
}

/// Eigenvalues of ΨᵀΨ on the 3D DFT lattice of `shape`.
pub fn psi_gram_spectrum(shape: (usize, usize, usize), mode: Regularizer) -> Array3<f64> {
    match mode {
        Regularizer::Identity => Array3::ones(shape),
        Regularizer::Tv3d | Regularizer::Tv3dAniso => {
            let lap = |k: usize, n: usize| 2.0 - 2.0 * (2.0 * std::f64::consts::PI * k as f64 / n as f64).cos();
            let (nz, ny, nx) = shape;
            Array3::from_shape_fn(shape, |(k, i, j)| lap(k, nz) + lap(i, ny) + lap(j, nx))
        }
    }
}

/// Lateral flip `q -> -q (mod P)` of every depth slice.
pub(crate) fn flip_lateral(x: &Array3<f64>) -> Array3<f64> {
    let (nz, py, px) = x.dim();
    let mut out = Array3::zeros((nz, py, px));
    Zip::indexed(&mut out).par_for_each(|(k, i, j), o| {
        *o = x[(k, negate_index(i, py), negate_index(j, px))];
    });
    out
}

/// Precomputed spectra of a PSF stack on the padded lattice.
#[derive(Clone, Debug)]
pub struct ConvOperator {
    psfs: Array3<f64>,
    /// 2D spectrum of each shifted, padded slice: `(Nz, Py, Px)`.
    slice_spectra: Array3<Complex64>,
    plan2: FftPlan,
    plan3: FftPlan,
    sensor: (usize, usize),
    padded: (usize, usize),
    crop_offset: (usize, usize),
}

impl ConvOperator {
    pub fn new(stack: &PsfStack) -> Result<Self> {
        let (nz, ny, nx) = stack.psfs.dim();
        if nz == 0 || ny == 0 || nx == 0 {
            return Err(Error::EmptyStack);
        }
        let padded = (2 * ny, 2 * nx);
        let crop_offset = (ny / 2, nx / 2);
        let plan2 = FftPlan::new(&[padded.0, padded.1]);
        let plan3 = FftPlan::new(&[nz, padded.0, padded.1]);
        // g_k[j] = hpad_k[j - c] with c = P/2, i.e. the padded slice rolled so its
        // on-axis point lands on the origin.
        let (cy, cx) = (padded.0 / 2, padded.1 / 2);
        let mut slice_spectra = Array3::<Complex64>::zeros((nz, padded.0, padded.1));
        for (k, mut spec) in slice_spectra.outer_iter_mut().enumerate() {
            let h = stack.psfs.index_axis(Axis(0), k);
            for ((r, c), &v) in h.indexed_iter() {
                let pr = (r + crop_offset.0 + cy) % padded.0;
                let pc = (c + crop_offset.1 + cx) % padded.1;
                spec[(pr, pc)] = Complex64::new(v, 0.0);
            }
            plan2.process(spec.view_mut(), Direction::Forward);
        }
        Ok(Self {
            psfs: stack.psfs.clone(),
            slice_spectra,
            plan2,
            plan3,
            sensor: (ny, nx),
            padded,
            crop_offset,
        })
    }

    pub fn nz(&self) -> usize {
        self.psfs.dim().0
    }

    pub fn sensor_shape(&self) -> (usize, usize) {
        self.sensor
    }

    pub fn padded_shape(&self) -> (usize, usize) {
        self.padded
    }

    /// `(Nz, Py, Px)`
    pub fn volume_shape(&self) -> (usize, usize, usize) {
        (self.nz(), self.padded.0, self.padded.1)
    }

    /// On-axis voxel `(row, col)`.
    pub fn center(&self) -> (usize, usize) {
        (self.padded.0 / 2, self.padded.1 / 2)
    }

    pub fn crop_offset(&self) -> (usize, usize) {
        self.crop_offset
    }

    pub fn psfs(&self) -> &Array3<f64> {
        &self.psfs
    }

    /// Per-slice 2D spectra, shape `(Nz, 2Ny, 2Nx)`.
    pub fn slice_spectra(&self) -> &Array3<Complex64> {
        &self.slice_spectra
    }

    pub(crate) fn plan3(&self) -> &FftPlan {
        &self.plan3
    }

    fn check_volume(&self, x: &Array3<f64>) -> Result<()> {
        let expected = self.volume_shape();
        if x.dim() != expected {
            return Err(Error::ShapeMismatch {
                expected: vec![expected.0, expected.1, expected.2],
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Sensor window of a padded-lattice image.
    pub fn crop(&self, padded: &Array2<f64>) -> Array2<f64> {
        let (oy, ox) = self.crop_offset;
        let (ny, nx) = self.sensor;
        padded.slice(s![oy..oy + ny, ox..ox + nx]).to_owned()
    }

    /// Zero-extension of a sensor image onto the padded lattice (Cᵀ).
    pub fn pad(&self, b: &Array2<f64>) -> Array2<f64> {
        let (oy, ox) = self.crop_offset;
        let (ny, nx) = self.sensor;
        let mut out = Array2::zeros(self.padded);
        out.slice_mut(s![oy..oy + ny, ox..ox + nx]).assign(b);
        out
    }

    /// `b = C Σ_z (h_z ⊛ x_z)`, with the lateral inversion of the object.
    pub fn apply(&self, x: &Volume) -> Result<SensorImage> {
        self.check_volume(&x.data)?;
        let flipped = flip_lateral(&x.data);
        let mut spec = to_complex3(&flipped);
        self.plan2.process(spec.view_mut(), Direction::Forward);
        let mut acc = Array2::<Complex64>::zeros(self.padded);
        for (s, g) in spec.outer_iter().zip(self.slice_spectra.outer_iter()) {
            Zip::from(&mut acc).and(&s).and(&g).par_for_each(|a, &s, &g| *a += s * g);
        }
        self.plan2.process(acc.view_mut(), Direction::Inverse);
        let full = acc.mapv(|c| c.re);
        Ok(SensorImage::new(self.crop(&full)))
    }

    /// Exact adjoint of [`apply`](Self::apply): zero-pad, correlate with each slice, flip.
    pub fn adjoint(&self, b: &SensorImage) -> Result<Volume> {
        if b.dim() != self.sensor {
            return Err(Error::ShapeMismatch {
                expected: vec![self.sensor.0, self.sensor.1],
                actual: b.data.shape().to_vec(),
            });
        }
        let mut bhat = self.pad(&b.data).mapv(|v| Complex64::new(v, 0.0));
        self.plan2.process(bhat.view_mut(), Direction::Forward);
        let mut out = Array3::<Complex64>::zeros(self.volume_shape());
        Zip::from(out.outer_iter_mut())
            .and(self.slice_spectra.outer_iter())
            .par_for_each(|mut o, g| {
                Zip::from(&mut o).and(&g).and(&bhat).for_each(|o, g, b| *o = g.conj() * b);
            });
        self.plan2.process(out.view_mut(), Direction::Inverse);
        Ok(Volume::new(flip_lateral(&out.mapv(|c| c.re))))
    }

    /// Exact sparse evaluation of `apply` as a sum of shifted, zero-filled slices.
    pub fn apply_sparse(&self, voxels: &[Voxel]) -> Result<SensorImage> {
        let (nz, py, px) = self.volume_shape();
        let (ny, nx) = self.sensor;
        let (cy, cx) = self.center();
        let mut out = Array2::zeros((ny, nx));
        for v in voxels {
            if v.plane >= nz || v.row >= py || v.col >= px {
                return Err(invalid("voxels", format!("voxel {v:?} outside volume {:?}", (nz, py, px))));
            }
            let h = self.psfs.index_axis(Axis(0), v.plane);
            let dy = v.row as isize - cy as isize;
            let dx = v.col as isize - cx as isize;
            for r in 0..ny {
                let sr = r as isize + dy;
                if sr < 0 || sr >= ny as isize {
                    continue;
                }
                for c in 0..nx {
                    let sc = c as isize + dx;
                    if sc < 0 || sc >= nx as isize {
                        continue;
                    }
                    out[(r, c)] += v.weight * h[(sr as usize, sc as usize)];
                }
            }
        }
        Ok(SensorImage::new(out))
    }

    /// Spectrum of the z-reversed 3D kernel `K[-k mod Nz] = g_k`.
    pub fn volume_spectrum(&self) -> Array3<Complex64> {
        let nz = self.nz();
        let mut k3 = Array3::<Complex64>::zeros(self.volume_shape());
        for k in 0..nz {
            k3.index_axis_mut(Axis(0), negate_index(k, nz))
                .assign(&self.slice_spectra.index_axis(Axis(0), k));
        }
        // Slices already hold 2D spectra; finish with the transform along z.
        FftPlan::new(&[nz]).process(k3.view_mut().permuted_axes([1, 2, 0]), Direction::Forward);
        k3
    }

    /// Eigenvalues of MᵀM on the 3D DFT lattice.
    ///
    /// M = K·R with R the lateral flip, so MᵀM = R KᵀK R, whose spectrum is
    /// `|K̂|²` evaluated at laterally negated frequencies.
    pub fn gram_spectrum(&self) -> Array3<f64> {
        let k3 = self.volume_spectrum();
        let (nz, py, px) = k3.dim();
        Array3::from_shape_fn((nz, py, px), |(k, i, j)| {
            k3[(k, negate_index(i, py), negate_index(j, px))].norm_sqr()
        })
    }

    /// Full 3D circulant `M x` on the padded lattice (slice 0 holds the depth sum).
    pub fn m_apply(&self, x: &Array3<f64>, kernel: &Array3<Complex64>) -> Array3<f64> {
        let mut spec = to_complex3(&flip_lateral(x));
        self.plan3.process(spec.view_mut(), Direction::Forward);
        Zip::from(&mut spec).and(kernel).par_for_each(|s, k| *s *= k);
        self.plan3.process(spec.view_mut(), Direction::Inverse);
        spec.mapv(|c| c.re)
    }

    /// `Mᵀ y` on the padded lattice.
    pub fn m_adjoint(&self, y: &Array3<f64>, kernel: &Array3<Complex64>) -> Array3<f64> {
        let mut spec = to_complex3(y);
        self.plan3.process(spec.view_mut(), Direction::Forward);
        Zip::from(&mut spec).and(kernel).par_for_each(|s, k| *s *= k.conj());
        self.plan3.process(spec.view_mut(), Direction::Inverse);
        flip_lateral(&spec.mapv(|c| c.re))
    }

    /// `MᵀM x` through the diagonal Gram spectrum.
    pub fn gram_apply(&self, x: &Array3<f64>, gram: &Array3<f64>) -> Array3<f64> {
        let mut spec = to_complex3(x);
        self.plan3.process(spec.view_mut(), Direction::Forward);
        Zip::from(&mut spec).and(gram).par_for_each(|s, &g| *s *= g);
        self.plan3.process(spec.view_mut(), Direction::Inverse);
        spec.mapv(|c| c.re)
    }

    /// The 0/1 mask `DᵀD` on the `(Nz, Py, Px)` lattice: slice 0, sensor window.
    pub fn data_mask(&self) -> Array3<f64> {
        let mut mask = Array3::zeros(self.volume_shape());
        let (oy, ox) = self.crop_offset;
        let (ny, nx) = self.sensor;
        mask.slice_mut(s![0, oy..oy + ny, ox..ox + nx]).fill(1.0);
        mask
    }

    /// `Dᵀ b`: the measurement placed in slice 0 of the padded volume lattice.
    pub fn data_adjoint(&self, b: &Array2<f64>) -> Array3<f64> {
        let mut out = Array3::zeros(self.volume_shape());
        out.index_axis_mut(Axis(0), 0).assign(&self.pad(b));
        out
    }

    /// `D v`: sensor window of slice 0.
    pub fn data_apply(&self, v: ArrayView3<'_, f64>) -> Array2<f64> {
        self.crop(&v.index_axis(Axis(0), 0).to_owned())
    }
}

pub fn build_operator(stack: &PsfStack) -> Result<ConvOperator> {
    ConvOperator::new(stack)
}

/// Inner product accumulated in f64 with a fixed pairwise order.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.par_iter().zip(b.par_iter()).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_stack(nz: usize, ny: usize, nx: usize, seed: u64) -> PsfStack {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psfs = Array3::from_shape_fn((nz, ny, nx), |_| rng.random::<f64>());
        PsfStack::new(psfs, (0..nz).map(|k| 10.0 + k as f64).collect()).unwrap()
    }

    fn random_volume(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
        Array3::from_shape_fn(shape, |_| rng.random::<f64>() - 0.5)
    }

    #[test]
    fn spectra_shape_is_twice_lateral() {
        let op = ConvOperator::new(&random_stack(3, 5, 7, 1)).unwrap();
        assert_eq!(op.slice_spectra().dim(), (3, 10, 14));
        assert_eq!(op.volume_shape(), (3, 10, 14));
    }

    #[test]
    fn empty_stack_is_rejected() {
        let stack = PsfStack {
            psfs: Array3::zeros((0, 4, 4)),
            depth_planes: vec![],
        };
        assert!(matches!(ConvOperator::new(&stack), Err(Error::EmptyStack)));
    }

    #[test]
    fn on_axis_voxel_reproduces_slice() {
        let stack = random_stack(3, 8, 6, 2);
        let op = ConvOperator::new(&stack).unwrap();
        let (cy, cx) = op.center();
        for k in 0..3 {
            let mut x = Volume::zeros(op.volume_shape());
            x.data[(k, cy, cx)] = 1.0;
            let b = op.apply(&x).unwrap();
            let diff = (&b.data - &stack.psfs.index_axis(Axis(0), k)).mapv(f64::abs);
            assert!(diff.iter().all(|&d| d < 1e-12));
        }
    }

    #[test]
    fn off_axis_voxel_shifts_slice_with_zero_fill() {
        let stack = random_stack(2, 8, 8, 3);
        let op = ConvOperator::new(&stack).unwrap();
        let (cy, cx) = op.center();
        let j = 3usize;
        let mut x = Volume::zeros(op.volume_shape());
        x.data[(1, cy, cx + j)] = 1.0;
        let b = op.apply(&x).unwrap();
        let h = stack.psfs.index_axis(Axis(0), 1);
        for r in 0..8 {
            for c in 0..8 {
                let expect = if c + j < 8 { h[(r, c + j)] } else { 0.0 };
                assert!((b.data[(r, c)] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn delta_psf_sums_inverted_slices() {
        let (ny, nx) = (4, 6);
        // The on-axis sensor pixel is the padded centre minus the crop offset.
        let (oy, ox) = (ny / 2, nx / 2);
        let (cy, cx) = (ny, nx);
        let mut psfs = Array3::zeros((2, ny, nx));
        psfs[(0, cy - oy, cx - ox)] = 1.0;
        psfs[(1, cy - oy, cx - ox)] = 1.0;
        let stack = PsfStack::new(psfs, vec![10.0, 11.0]).unwrap();
        let op = ConvOperator::new(&stack).unwrap();
        let (py, px) = op.padded_shape();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_volume(op.volume_shape(), &mut rng);
        let b = op.apply(&Volume::new(x.clone())).unwrap();
        let expect = Array2::from_shape_fn((ny, nx), |(r, c)| {
            let i = r + oy;
            let j = c + ox;
            x.slice(s![.., (py - i) % py, (px - j) % px]).sum()
        });
        for (a, e) in b.data.iter().zip(expect.iter()) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn apply_is_linear() {
        let op = ConvOperator::new(&random_stack(2, 6, 6, 5)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_volume(op.volume_shape(), &mut rng);
        let a = op.apply(&Volume::new(x.clone())).unwrap();
        let b = op.apply(&Volume::new(&x * 2.5)).unwrap();
        for (p, q) in a.data.iter().zip(b.data.iter()) {
            assert!((2.5 * p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_dot_product() {
        let op = ConvOperator::new(&random_stack(3, 8, 10, 7)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let x = random_volume(op.volume_shape(), &mut rng);
            let b = Array2::from_shape_fn(op.sensor_shape(), |_| rng.random::<f64>());
            let ax = op.apply(&Volume::new(x.clone())).unwrap();
            let atb = op.adjoint(&SensorImage::new(b.clone())).unwrap();
            let lhs = dot(ax.data.as_slice().unwrap(), b.as_slice().unwrap());
            let rhs = dot(x.as_slice().unwrap(), atb.data.as_slice().unwrap());
            let scale = norm(ax.data.as_slice().unwrap()) * norm(b.as_slice().unwrap());
            assert!((lhs - rhs).abs() <= 1e-10 * scale);
        }
        let zero = op.adjoint(&SensorImage::zeros(8, 10)).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_of_delta_is_flipped_stack() {
        let stack = random_stack(2, 6, 6, 9);
        let op = ConvOperator::new(&stack).unwrap();
        let (r0, c0) = (2usize, 4usize);
        let mut b = Array2::zeros((6, 6));
        b[(r0, c0)] = 1.0;
        let v = op.adjoint(&SensorImage::new(b)).unwrap();
        let (cy, cx) = op.center();
        for k in 0..2 {
            let h = stack.psfs.index_axis(Axis(0), k);
            for ((_, q_r, q_c), &val) in v.data.slice(s![k..k + 1, .., ..]).indexed_iter() {
                // column (k, q) at pixel p is h[p + q - c]
                let sr = r0 as isize + q_r as isize - cy as isize;
                let sc = c0 as isize + q_c as isize - cx as isize;
                let expect = if (0..6).contains(&sr) && (0..6).contains(&sc) {
                    h[(sr as usize, sc as usize)]
                } else {
                    0.0
                };
                assert!((val - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sparse_path_matches_fft_path() {
        let op = ConvOperator::new(&random_stack(3, 8, 8, 10)).unwrap();
        let voxels = [
            Voxel { plane: 0, row: 8, col: 8, weight: 1.0 },
            Voxel { plane: 2, row: 3, col: 13, weight: 0.5 },
            Voxel { plane: 1, row: 15, col: 0, weight: 2.0 },
        ];
        let mut x = Volume::zeros(op.volume_shape());
        for v in &voxels {
            x.data[(v.plane, v.row, v.col)] += v.weight;
        }
        let a = op.apply(&x).unwrap();
        let b = op.apply_sparse(&voxels).unwrap();
        for (p, q) in a.data.iter().zip(b.data.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(op
            .apply_sparse(&[Voxel { plane: 3, row: 0, col: 0, weight: 1.0 }])
            .is_err());
    }

    #[test]
    fn three_d_operator_slice_zero_is_apply() {
        let op = ConvOperator::new(&random_stack(3, 6, 6, 11)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_volume(op.volume_shape(), &mut rng);
        let kernel = op.volume_spectrum();
        let mx = op.m_apply(&x, &kernel);
        let a = op.apply(&Volume::new(x.clone())).unwrap();
        let d = op.data_apply(mx.view());
        for (p, q) in a.data.iter().zip(d.iter()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn gram_spectrum_diagonalizes_mtm() {
        let op = ConvOperator::new(&random_stack(3, 6, 8, 13)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random_volume(op.volume_shape(), &mut rng);
        let kernel = op.volume_spectrum();
        let composed = op.m_adjoint(&op.m_apply(&x, &kernel), &kernel);
        let spectral = op.gram_apply(&x, &op.gram_spectrum());
        let scale = norm(composed.as_slice().unwrap());
        for (p, q) in composed.iter().zip(spectral.iter()) {
            assert!((p - q).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn psi_identity_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = random_volume((2, 3, 4), &mut rng);
        let g = psi_apply(&x, Regularizer::Identity);
        assert_eq!(g.index_axis(Axis(0), 0), x);
        assert_eq!(psi_adjoint(&g, Regularizer::Identity), x);
    }

    #[test]
    fn tv_of_constant_is_zero_and_unit_voxel_has_six_entries() {
        let x = Array3::from_elem((3, 4, 5), 2.0);
        assert!(psi_apply(&x, Regularizer::Tv3d).iter().all(|&v| v == 0.0));
        let mut d = Array3::zeros((3, 4, 5));
        d[(1, 2, 2)] = 1.0;
        let g = psi_apply(&d, Regularizer::Tv3d);
        let nz: Vec<f64> = g.iter().copied().filter(|&v| v != 0.0).collect();
        assert_eq!(nz.len(), 6);
        assert_eq!(nz.iter().filter(|&&v| v == 1.0).count(), 3);
        assert_eq!(nz.iter().filter(|&&v| v == -1.0).count(), 3);
    }

    #[test]
    fn psi_tv_adjoint_and_laplacian() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let x = random_volume((3, 5, 4), &mut rng);
        let g = Array4::from_shape_fn((3, 3, 5, 4), |_| rng.random::<f64>() - 0.5);
        let lhs = dot(psi_apply(&x, Regularizer::Tv3d).as_slice().unwrap(), g.as_slice().unwrap());
        let rhs = dot(x.as_slice().unwrap(), psi_adjoint(&g, Regularizer::Tv3d).as_slice().unwrap());
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));

        let mut d = Array3::zeros((3, 5, 4));
        d[(1, 2, 1)] = 1.0;
        let lap = psi_adjoint(&psi_apply(&d, Regularizer::Tv3d), Regularizer::Tv3d);
        assert_eq!(lap[(1, 2, 1)], 6.0);
        for n in [(0, 2, 1), (2, 2, 1), (1, 1, 1), (1, 3, 1), (1, 2, 0), (1, 2, 2)] {
            assert_eq!(lap[n], -1.0);
        }
        assert_eq!(lap.iter().filter(|&&v| v != 0.0).count(), 7);
    }
}
