//! Multi-dimensional FFTs over ndarray containers, built from rustfft 1D plans.

use std::cell::RefCell;
use std::sync::Arc;

use ndarray::{Array3, ArrayViewMut, Axis, Dimension, Zip};
use num_complex::Complex64;
use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// Cached forward/inverse plans for every axis of a fixed shape.
///
/// Inverse transforms are normalized by the number of transformed samples, so
/// `inverse(forward(x)) == x` up to rounding.
#[derive(Clone)]
pub struct FftPlan {
    shape: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for FftPlan {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftPlan").field("shape", &self.shape).finish()
    }
}

impl FftPlan {
    pub fn new(shape: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = shape.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = shape.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self {
            shape: shape.to_vec(),
            forward,
            inverse,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Transforms `data` in place along its trailing `self.shape().len()` axes.
    ///
    /// Leading axes (if any) are treated as a batch.
    pub fn process<D: Dimension>(&self, mut data: ArrayViewMut<'_, Complex64, D>, dir: Direction) {
        let nd = data.ndim();
        let k = self.shape.len();
        assert!(nd >= k, "array has fewer axes than the plan");
        assert_eq!(&data.shape()[nd - k..], &self.shape[..], "plan/array shape mismatch");
        let plans = match dir {
            Direction::Forward => &self.forward,
            Direction::Inverse => &self.inverse,
        };
        for (i, plan) in plans.iter().enumerate() {
            let axis = Axis(nd - k + i);
            transform_axis(&mut data, axis, plan.as_ref());
        }
        if dir == Direction::Inverse {
            let scale = 1.0 / self.shape.iter().product::<usize>() as f64;
            data.par_mapv_inplace(|c| c * scale);
        }
    }
}

fn transform_axis<D: Dimension>(data: &mut ArrayViewMut<'_, Complex64, D>, axis: Axis, plan: &dyn Fft<f64>) {
    let n = data.len_of(axis);
    if n <= 1 {
        return;
    }
    let last = data.ndim() - 1;
    if axis.index() == last && data.is_standard_layout() {
        let slice = data.as_slice_mut().expect("standard layout");
        slice.par_chunks_mut(n).for_each_init(
            || vec![Complex64::default(); plan.get_inplace_scratch_len()],
            |scratch, row| plan.process_with_scratch(row, scratch),
        );
        return;
    }
    thread_local! {
        static BUFFERS: RefCell<(Vec<Complex64>, Vec<Complex64>)> = const { RefCell::new((Vec::new(), Vec::new())) };
    }
    let scratch_len = plan.get_inplace_scratch_len();
    Zip::from(data.lanes_mut(axis)).par_for_each(|mut lane| {
        BUFFERS.with(|cell| {
            let (buf, scratch) = &mut *cell.borrow_mut();
            buf.clear();
            buf.extend(lane.iter().copied());
            scratch.resize(scratch_len, Complex64::default());
            plan.process_with_scratch(buf, scratch);
            for (v, b) in lane.iter_mut().zip(buf.iter()) {
                *v = *b;
            }
        })
    });
}

pub(crate) fn to_complex3(a: &Array3<f64>) -> Array3<Complex64> {
    a.mapv(|v| Complex64::new(v, 0.0))
}

/// Index map for `k -> -k (mod n)`.
pub(crate) fn negate_index(k: usize, n: usize) -> usize {
    if k == 0 {
        0
    } else {
        n - k
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn naive_dft2(a: &Array2<Complex64>) -> Array2<Complex64> {
        let (r, c) = a.dim();
        let mut out = Array2::zeros((r, c));
        for ((u, v), o) in out.indexed_iter_mut() {
            let mut acc = Complex64::default();
            for ((y, x), val) in a.indexed_iter() {
                let ph = -2.0 * std::f64::consts::PI * ((u * y) as f64 / r as f64 + (v * x) as f64 / c as f64);
                acc += val * Complex64::from_polar(1.0, ph);
            }
            *o = acc;
        }
        out
    }

    #[test]
    fn matches_naive_dft_in_2d() {
        let a = Array2::from_shape_fn((4, 6), |(i, j)| Complex64::new((i * 7 + j * 3) as f64 % 5.0, j as f64 * 0.25));
        let mut b = a.clone();
        FftPlan::new(&[4, 6]).process(b.view_mut(), Direction::Forward);
        let expect = naive_dft2(&a);
        for (x, y) in b.iter().zip(expect.iter()) {
            assert!((x - y).norm() < 1e-10);
        }
    }

    #[test]
    fn round_trip_3d_with_batch_axis() {
        let a = ndarray::Array4::from_shape_fn((2, 3, 4, 5), |(b, i, j, k)| {
            Complex64::new((b + i * j) as f64 - k as f64, (i + k) as f64 * 0.5)
        });
        let mut b = a.clone();
        let plan = FftPlan::new(&[3, 4, 5]);
        plan.process(b.view_mut(), Direction::Forward);
        plan.process(b.view_mut(), Direction::Inverse);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).norm() < 1e-12);
        }
    }
}
