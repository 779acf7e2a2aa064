//! Single-shot 3D reconstruction for diffuser-based lensless cameras.
//!
//! A 2D sensor measurement `b` is modeled as a cropped sum of per-depth
//! convolutions of the volume with on-axis caustic PSFs, and the volume is
//! recovered by solving
//!
//! ```text
//! argmin_{x ≥ 0} ½‖b − Ax‖² + λ‖Ψx‖₁
//! ```
//!
//! with ADMM, where Ψ is the identity (native sparsity) or 3D finite
//! differences (total variation).
//!
//! - [`grid`]: system geometry, field of view, depth-plane schedule and the
//!   non-uniform voxel lattice.
//! - [`optics`]: synthetic diffusers, ray-binned caustic PSFs, calibration
//!   stacks and measurement simulation.
//! - [`forward`]: the cropped-convolution operator, its adjoint and Ψ.
//! - [`solver`]: ADMM with closed-form sub-solves and residual balancing.
//! - [`analysis`]: two-point and multi-point resolvability, local condition
//!   numbers and PSF similarity.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod error;
pub mod fft;
pub mod forward;
pub mod grid;
pub mod optics;
pub mod solver;

pub use error::{Error, Result};
pub use forward::{build_operator, ConvOperator, Regularizer, SensorImage, Volume, Voxel};
pub use grid::{
    build_grid, compute_fov, depth_plane_spacing, depth_planes_between, magnification, FovLimit, FovReport,
    SystemGeometry, VolumeGrid,
};
pub use optics::{
    calibrate, generate_diffuser, render_psf, simulate_measurement, DiffuserParams, DiffuserSurface, Lattice,
    NoiseModel, PointSource, PsfStack, RenderOptions, Scene,
};
pub use solver::{default_lambda, solve, AdmmProblem, AdmmState, ConvergenceTrace, Solution, SolverConfig};
