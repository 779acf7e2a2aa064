//! ADMM reconstruction with the splitting `v = Mx`, `u = Ψx`, `w = x`.
//!
//! Every sub-problem has a closed form: vector shrinkage for `u`, a diagonal
//! division on the padded lattice for `v`, a projection for `w` and a
//! pointwise division in 3D frequency space for `x`. Duals are stored scaled
//! by their penalty (`ξ/μ₁`, `η/μ₂`, `ρ/μ₃`), which is what makes the
//! residual-balancing rule's dual rescaling keep the true multipliers fixed.
//!
//! Reductions (norms, inner products) use rayon's tree sum, so results may
//! differ between thread counts by floating-point reassociation only.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, Array3, Array4, Axis, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::fft::{negate_index, to_complex3, Direction};
use crate::forward::{psi_adjoint, psi_apply, psi_gram_spectrum, ConvOperator, Regularizer, SensorImage, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    /// Regularization weight; `None` selects `1e-3 · max(Aᵀb)`.
    pub lambda: Option<f64>,
    pub regularizer: Regularizer,
    pub max_iters: usize,
    pub tol_abs: f64,
    pub tol_rel: f64,
    pub auto_tune: bool,
    /// Penalty multiplier applied on rebalancing.
    pub tune_factor: f64,
    /// Residual ratio that triggers rebalancing.
    pub tune_ratio: f64,
    /// Initial (μ₁, μ₂, μ₃); `None` derives them from the operator spectrum.
    pub mu: Option<[f64; 3]>,
    pub nonneg: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            regularizer: Regularizer::Identity,
            max_iters: 200,
            tol_abs: 1e-5,
            tol_rel: 1e-4,
            auto_tune: true,
            tune_factor: 2.0,
            tune_ratio: 10.0,
            mu: None,
            nonneg: true,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(invalid("lambda", "must be finite and >= 0"));
            }
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be >= 1"));
        }
        if !(self.tol_abs >= 0.0 && self.tol_rel >= 0.0) {
            return Err(invalid("tol_abs", "tolerances must be >= 0"));
        }
        if !(self.tune_factor > 1.0) {
            return Err(invalid("tune_factor", "must be > 1"));
        }
        if !(self.tune_ratio >= 1.0) {
            return Err(invalid("tune_ratio", "must be >= 1"));
        }
        if let Some(mu) = self.mu {
            check_penalties(&mu)?;
        }
        Ok(())
    }
}

fn check_penalties(mu: &[f64; 3]) -> Result<()> {
    for (i, m) in mu.iter().enumerate() {
        if !(*m > 0.0 && m.is_finite()) {
            let field = ["mu1", "mu2", "mu3"][i];
            return Err(invalid(field, format!("penalty must be > 0, got {m}")));
        }
    }
    Ok(())
}

/// Proximal operator of `ν‖·‖₁` on Ψ-space coefficients `(components, …)`.
///
/// [`Regularizer::Tv3d`] shrinks the per-voxel gradient vector by its
/// Euclidean norm; the other modes shrink each coefficient independently.
pub fn soft_threshold(g: &Array4<f64>, nu: f64, mode: Regularizer) -> Array4<f64> {
    if mode.is_vectorial() && g.dim().0 > 1 {
        let scale = g
            .map_axis(Axis(0), |lane| lane.iter().map(|v| v * v).sum::<f64>().sqrt())
            .mapv(|n| if n > 0.0 { (n - nu).max(0.0) / n } else { 0.0 });
        g * &scale.insert_axis(Axis(0))
    } else {
        g.mapv(|v| v.signum() * (v.abs() - nu).max(0.0))
    }
}

/// All primal, auxiliary and (scaled) dual variables of a run.
#[derive(Clone, Debug)]
pub struct AdmmState {
    pub x: Array3<f64>,
    pub u: Array4<f64>,
    /// Lives on the `(Nz, Py, Px)` lattice of the 3D circulant M; only the
    /// sensor window of slice 0 is observed.
    pub v: Array3<f64>,
    pub w: Array3<f64>,
    /// ξ / μ₁
    pub xi: Array3<f64>,
    /// η / μ₂
    pub eta: Array4<f64>,
    /// ρ / μ₃
    pub rho: Array3<f64>,
    pub mu: [f64; 3],
    pub iteration: usize,
    mx: Array3<f64>,
    psix: Array4<f64>,
}

impl AdmmState {
    /// All-zero state.
    pub fn zeros(shape: (usize, usize, usize), mode: Regularizer, mu: [f64; 3]) -> Self {
        let (nz, py, px) = shape;
        let psi_shape = (mode.components(), nz, py, px);
        Self {
            x: Array3::zeros(shape),
            u: Array4::zeros(psi_shape),
            v: Array3::zeros(shape),
            w: Array3::zeros(shape),
            xi: Array3::zeros(shape),
            eta: Array4::zeros(psi_shape),
            rho: Array3::zeros(shape),
            mu,
            iteration: 0,
            mx: Array3::zeros(shape),
            psix: Array4::zeros(psi_shape),
        }
    }

    /// Unscaled multipliers (ξ, η, ρ).
    pub fn multipliers(&self) -> (Array3<f64>, Array4<f64>, Array3<f64>) {
        (&self.xi * self.mu[0], &self.eta * self.mu[1], &self.rho * self.mu[2])
    }

    /// Residual balancing: per constraint, scale μ up when the primal residual
    /// dominates and down when the dual residual does.
    pub fn tune_penalties(&mut self, residuals: &Residuals, config: &SolverConfig) {
        let tau = config.tune_factor;
        for i in 0..3 {
            let (r, s) = (residuals.primal[i], residuals.dual[i]);
            let factor = if r > config.tune_ratio * s {
                tau
            } else if s > config.tune_ratio * r {
                1.0 / tau
            } else {
                continue;
            };
            self.mu[i] *= factor;
            let inv = 1.0 / factor;
            match i {
                0 => self.xi.par_mapv_inplace(|v| v * inv),
                1 => self.eta.par_mapv_inplace(|v| v * inv),
                _ => self.rho.par_mapv_inplace(|v| v * inv),
            }
        }
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        let bad3 = |a: &Array3<f64>| a.iter().any(|v| !v.is_finite());
        let bad4 = |a: &Array4<f64>| a.iter().any(|v| !v.is_finite());
        if bad3(&self.x) {
            Some("x")
        } else if bad4(&self.u) {
            Some("u")
        } else if bad3(&self.v) {
            Some("v")
        } else if bad3(&self.w) {
            Some("w")
        } else if bad3(&self.xi) {
            Some("xi")
        } else if bad4(&self.eta) {
            Some("eta")
        } else if bad3(&self.rho) {
            Some("rho")
        } else {
            None
        }
    }
}

/// Per-constraint residual norms, ordered (v = Mx, u = Ψx, w = x).
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Residuals {
    pub primal: [f64; 3],
    pub dual: [f64; 3],
    pub primal_tol: [f64; 3],
    pub dual_tol: [f64; 3],
}

impl Residuals {
    pub fn converged(&self) -> bool {
        (0..3).all(|i| self.primal[i] <= self.primal_tol[i] && self.dual[i] <= self.dual_tol[i])
    }

    pub fn max_primal(&self) -> f64 {
        self.primal.iter().copied().fold(0.0, f64::max)
    }

    pub fn dual_norm(&self) -> f64 {
        self.dual.iter().map(|d| d * d).sum::<f64>().sqrt()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub primal: [f64; 3],
    pub dual: [f64; 3],
    pub dual_norm: f64,
    pub mu: [f64; 3],
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "iteration,objective,primal_v,primal_u,primal_w,dual_v,dual_u,dual_w,dual,mu1,mu2,mu3,seconds"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:.6}",
                r.iteration,
                r.objective,
                r.primal[0],
                r.primal[1],
                r.primal[2],
                r.dual[0],
                r.dual[1],
                r.dual[2],
                r.dual_norm,
                r.mu[0],
                r.mu[1],
                r.mu[2],
                r.seconds
            )?;
        }
        Ok(())
    }
}

fn norm3(a: &Array3<f64>) -> f64 {
    a.as_slice().map(crate::forward::norm).unwrap_or_else(|| a.iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn norm4(a: &Array4<f64>) -> f64 {
    a.as_slice().map(crate::forward::norm).unwrap_or_else(|| a.iter().map(|v| v * v).sum::<f64>().sqrt())
}

fn diff_norm3(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    Zip::from(a).and(b).par_fold(|| 0.0, |acc, x, y| acc + (x - y) * (x - y), |p, q| p + q).sqrt()
}

fn diff_norm4(a: &Array4<f64>, b: &Array4<f64>) -> f64 {
    Zip::from(a).and(b).par_fold(|| 0.0, |acc, x, y| acc + (x - y) * (x - y), |p, q| p + q).sqrt()
}

fn negate_lateral(a: &Array3<Complex64>) -> Array3<Complex64> {
    let (nz, py, px) = a.dim();
    let mut out = Array3::zeros((nz, py, px));
    Zip::indexed(&mut out).par_for_each(|(k, i, j), o| *o = a[(k, negate_index(i, py), negate_index(j, px))]);
    out
}

/// `λ‖Ψx‖₁` with the norm matching the shrinkage of `mode`.
pub fn regularizer_value(psix: &Array4<f64>, mode: Regularizer) -> f64 {
    if mode.is_vectorial() && psix.dim().0 > 1 {
        psix.lanes(Axis(0)).into_iter().map(|l| l.iter().map(|v| v * v).sum::<f64>().sqrt()).sum()
    } else {
        psix.iter().map(|v| v.abs()).sum()
    }
}

/// Heuristic default λ = 1e-3 · max(Aᵀb).
pub fn default_lambda(op: &ConvOperator, b: &SensorImage) -> Result<f64> {
    let atb = op.adjoint(b)?;
    Ok(1e-3 * atb.data.iter().copied().fold(0.0, f64::max))
}

/// Fixed data for one reconstruction: measurement, spectra and masks.
pub struct AdmmProblem<'a> {
    pub op: &'a ConvOperator,
    pub b: Array2<f64>,
    pub lambda: f64,
    pub mode: Regularizer,
    kernel: Array3<Complex64>,
    gram: Array3<f64>,
    psi_gram: Array3<f64>,
    mask: Array3<f64>,
    dtb: Array3<f64>,
}

impl<'a> AdmmProblem<'a> {
    pub fn new(op: &'a ConvOperator, b: &SensorImage, lambda: f64, mode: Regularizer) -> Result<Self> {
        if b.dim() != op.sensor_shape() {
            let (ny, nx) = op.sensor_shape();
            return Err(Error::ShapeMismatch {
                expected: vec![ny, nx],
                actual: b.data.shape().to_vec(),
            });
        }
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(invalid("lambda", "must be finite and >= 0"));
        }
        let kernel = op.volume_spectrum();
        let (nz, py, px) = kernel.dim();
        let gram = Array3::from_shape_fn((nz, py, px), |(k, i, j)| {
            kernel[(k, negate_index(i, py), negate_index(j, px))].norm_sqr()
        });
        Ok(Self {
            op,
            b: b.data.clone(),
            lambda,
            mode,
            psi_gram: psi_gram_spectrum((nz, py, px), mode),
            mask: op.data_mask(),
            dtb: op.data_adjoint(&b.data),
            kernel,
            gram,
        })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.kernel.dim()
    }

    /// Mean eigenvalue of MᵀM, a natural scale for μ₂ and μ₃.
    pub fn gram_scale(&self) -> f64 {
        self.gram.mean().unwrap_or(1.0)
    }

    pub fn m_apply(&self, x: &Array3<f64>) -> Array3<f64> {
        self.op.m_apply(x, &self.kernel)
    }

    pub fn m_adjoint(&self, y: &Array3<f64>) -> Array3<f64> {
        self.op.m_adjoint(y, &self.kernel)
    }

    /// Solves `(μ₁MᵀM + μ₂ΨᵀΨ + μ₃I) x = r` by pointwise division in 3D frequency space.
    pub fn invert_x_system(&self, r: &Array3<f64>, mu: [f64; 3]) -> Array3<f64> {
        let mut spec = to_complex3(r);
        let plan = self.op.plan3();
        plan.process(spec.view_mut(), Direction::Forward);
        Zip::from(&mut spec)
            .and(&self.gram)
            .and(&self.psi_gram)
            .par_for_each(|s, &g, &l| *s /= mu[0] * g + mu[1] * l + mu[2]);
        plan.process(spec.view_mut(), Direction::Inverse);
        spec.mapv(|c| c.re)
    }

    /// `½‖b − Ax‖² + λ‖Ψx‖₁` from cached `Mx` and `Ψx`.
    fn objective_from(&self, mx: &Array3<f64>, psix: &Array4<f64>) -> f64 {
        let ax = self.op.data_apply(mx.view());
        let fit = Zip::from(&ax).and(&self.b).fold(0.0, |acc, a, b| acc + (a - b) * (a - b));
        0.5 * fit + self.lambda * regularizer_value(psix, self.mode)
    }

    /// Full objective `½‖b − Ax‖² + λ‖Ψx‖₁` of an arbitrary volume.
    pub fn objective(&self, x: &Array3<f64>) -> f64 {
        self.objective_from(&self.m_apply(x), &psi_apply(x, self.mode))
    }

    pub fn update_u(&self, state: &AdmmState) -> Array4<f64> {
        let arg = &state.psix + &state.eta;
        soft_threshold(&arg, self.lambda / state.mu[1], self.mode)
    }

    pub fn update_v(&self, state: &AdmmState) -> Array3<f64> {
        let mu1 = state.mu[0];
        let mut v = Array3::zeros(self.shape());
        Zip::from(&mut v)
            .and(&state.xi)
            .and(&state.mx)
            .and(&self.dtb)
            .and(&self.mask)
            .par_for_each(|v, &xi, &mx, &dtb, &m| *v = (mu1 * (xi + mx) + dtb) / (m + mu1));
        v
    }

    pub fn update_w(&self, state: &AdmmState, nonneg: bool) -> Array3<f64> {
        let mut w = &state.rho + &state.x;
        if nonneg {
            w.par_mapv_inplace(|v| v.max(0.0));
        }
        w
    }

    /// `r = μ₃(w − ρ̃) + μ₂Ψᵀ(u − η̃) + μ₁Mᵀ(v − ξ̃)` in the spatial domain.
    pub fn x_rhs(&self, state: &AdmmState) -> Array3<f64> {
        let [mu1, mu2, mu3] = state.mu;
        let mt = self.m_adjoint(&(&state.v - &state.xi));
        let pt = psi_adjoint(&(&state.u - &state.eta), self.mode);
        let mut r = Array3::zeros(self.shape());
        Zip::from(&mut r)
            .and(&state.w)
            .and(&state.rho)
            .and(&pt)
            .and(&mt)
            .par_for_each(|r, &w, &rho, &p, &m| *r = mu3 * (w - rho) + mu2 * p + mu1 * m);
        r
    }

    /// One ADMM iteration in the order u, v, w, x, then dual ascent.
    pub fn step(&self, state: &mut AdmmState, config: &SolverConfig) -> Result<(Residuals, f64)> {
        check_penalties(&state.mu)?;
        let [mu1, mu2, mu3] = state.mu;

        state.u = self.update_u(state);
        state.v = self.update_v(state);
        state.w = self.update_w(state, config.nonneg);

        // x-update with r assembled in frequency space: FFT(Mᵀy) is the
        // laterally negated conj(K̂)·Ŷ.
        let plan = self.op.plan3();
        let mut yhat = to_complex3(&(&state.v - &state.xi));
        plan.process(yhat.view_mut(), Direction::Forward);
        Zip::from(&mut yhat).and(&self.kernel).par_for_each(|y, k| *y *= k.conj());
        let mt_hat = negate_lateral(&yhat);
        drop(yhat);
        let pt = psi_adjoint(&(&state.u - &state.eta), self.mode);
        let mut rest = Array3::zeros(self.shape());
        Zip::from(&mut rest)
            .and(&state.w)
            .and(&state.rho)
            .and(&pt)
            .par_for_each(|r, &w, &rho, &p| *r = mu3 * (w - rho) + mu2 * p);
        drop(pt);
        let mut xhat = to_complex3(&rest);
        drop(rest);
        plan.process(xhat.view_mut(), Direction::Forward);
        Zip::from(&mut xhat)
            .and(&mt_hat)
            .and(&self.gram)
            .and(&self.psi_gram)
            .par_for_each(|x, &m, &g, &l| *x = (*x + m * mu1) / (mu1 * g + mu2 * l + mu3));
        drop(mt_hat);

        let mut mx_hat = negate_lateral(&xhat);
        Zip::from(&mut mx_hat).and(&self.kernel).par_for_each(|s, k| *s *= k);
        plan.process(mx_hat.view_mut(), Direction::Inverse);
        plan.process(xhat.view_mut(), Direction::Inverse);
        let x_new = xhat.mapv(|c| c.re);
        let mx_new = mx_hat.mapv(|c| c.re);
        drop((xhat, mx_hat));
        let psix_new = psi_apply(&x_new, self.mode);

        let dual = [
            mu1 * diff_norm3(&mx_new, &state.mx),
            mu2 * diff_norm4(&psix_new, &state.psix),
            mu3 * diff_norm3(&x_new, &state.x),
        ];

        Zip::from(&mut state.xi).and(&mx_new).and(&state.v).par_for_each(|d, &a, &b| *d += a - b);
        Zip::from(&mut state.eta).and(&psix_new).and(&state.u).par_for_each(|d, &a, &b| *d += a - b);
        Zip::from(&mut state.rho).and(&x_new).and(&state.w).par_for_each(|d, &a, &b| *d += a - b);

        let primal = [
            diff_norm3(&mx_new, &state.v),
            diff_norm4(&psix_new, &state.u),
            diff_norm3(&x_new, &state.w),
        ];
        let n_v = (state.v.len() as f64).sqrt();
        let n_u = (state.u.len() as f64).sqrt();
        let n_x = (state.x.len() as f64).sqrt();
        let (abs, rel) = (config.tol_abs, config.tol_rel);
        let primal_tol = [
            n_v * abs + rel * norm3(&mx_new).max(norm3(&state.v)),
            n_u * abs + rel * norm4(&psix_new).max(norm4(&state.u)),
            n_x * abs + rel * norm3(&x_new).max(norm3(&state.w)),
        ];
        let dual_tol = [
            n_v * abs + rel * mu1 * norm3(&state.xi),
            n_u * abs + rel * mu2 * norm4(&state.eta),
            n_x * abs + rel * mu3 * norm3(&state.rho),
        ];

        let objective = self.objective_from(&mx_new, &psix_new);
        state.x = x_new;
        state.mx = mx_new;
        state.psix = psix_new;
        state.iteration += 1;
        if let Some(field) = state.first_non_finite() {
            return Err(Error::NonFinite {
                field,
                iteration: state.iteration,
            });
        }
        Ok((
            Residuals {
                primal,
                dual,
                primal_tol,
                dual_tol,
            },
            objective,
        ))
    }

    /// Initial penalties: μ₁ = 1 and μ₂ = μ₃ = mean eigenvalue of MᵀM.
    pub fn default_penalties(&self) -> [f64; 3] {
        let s = self.gram_scale().max(f64::MIN_POSITIVE);
        [1.0, s, s]
    }

    /// Zero state whose cached products are consistent with x = 0.
    pub fn initial_state(&self, mu: [f64; 3]) -> AdmmState {
        AdmmState::zeros(self.shape(), self.mode, mu)
    }
}

#[derive(Clone, Debug)]
pub struct Solution {
    /// The projected iterate `w`.
    pub volume: Volume,
    pub trace: ConvergenceTrace,
    pub converged: bool,
    pub iterations: usize,
    pub lambda: f64,
}

/// Runs ADMM until every residual is within tolerance or `max_iters` is hit.
///
/// The measurement is normalized to unit peak before iterating; trace
/// residuals are in those normalized units, objectives in the original ones.
pub fn solve(b: &SensorImage, op: &ConvOperator, config: &SolverConfig) -> Result<Solution> {
    config.validate()?;
    if b.data.iter().any(|v| !v.is_finite()) {
        return Err(invalid("b", "measurement must be finite"));
    }
    if b.data.iter().any(|&v| v < 0.0) {
        return Err(invalid("b", "measurement must be nonnegative"));
    }
    let lambda = match config.lambda {
        Some(l) => l,
        None => default_lambda(op, b)?,
    };
    // Residual tolerances are absolute, so the data is brought to unit peak;
    // λ scales with it and the solution is scaled back.
    let peak = b.data.iter().copied().fold(0.0, f64::max);
    let scale = if peak > 0.0 { peak } else { 1.0 };
    let scaled = SensorImage::new(b.data.mapv(|v| v / scale));
    let problem = AdmmProblem::new(op, &scaled, lambda / scale, config.regularizer)?;
    let mu = config.mu.unwrap_or_else(|| problem.default_penalties());
    let mut state = problem.initial_state(mu);
    let start = Instant::now();
    let initial = (problem.objective_from(&state.mx, &state.psix) * scale * scale).max(f64::MIN_POSITIVE);
    let mut trace = ConvergenceTrace::default();
    let mut blowup = 0usize;
    let mut converged = false;
    for _ in 0..config.max_iters {
        let (res, objective) = problem.step(&mut state, config)?;
        let objective = objective * scale * scale;
        trace.rows.push(TraceRow {
            iteration: state.iteration,
            objective,
            primal: res.primal,
            dual: res.dual,
            dual_norm: res.dual_norm(),
            mu: state.mu,
            seconds: start.elapsed().as_secs_f64(),
        });
        if objective > 1e6 * initial {
            blowup += 1;
            if blowup >= 10 {
                return Err(Error::Diverged {
                    iteration: state.iteration,
                    trace: Box::new(trace),
                });
            }
        } else {
            blowup = 0;
        }
        if res.converged() {
            converged = true;
            break;
        }
        if config.auto_tune {
            state.tune_penalties(&res, config);
        }
    }
    Ok(Solution {
        volume: Volume::new(state.w * scale),
        iterations: state.iteration,
        trace,
        converged,
        lambda,
    })
}
