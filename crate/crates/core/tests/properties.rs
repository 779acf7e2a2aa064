use lensless_core::forward::{dot, psi_adjoint, psi_apply};
use lensless_core::solver::soft_threshold;
use lensless_core::*;
use ndarray::{Array2, Array3, Array4};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random3(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_fn(shape, |_| rng.random::<f64>() - 0.5)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjoint_identity_holds_for_any_shape(nz in 1usize..4, ny in 1usize..9, nx in 1usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psfs = Array3::from_shape_fn((nz, ny, nx), |_| rng.random::<f64>() + 1e-3);
        let op = ConvOperator::new(&PsfStack::new(psfs, (0..nz).map(|k| 10.0 + k as f64).collect()).unwrap()).unwrap();
        let x = Volume::new(random3(op.volume_shape(), &mut rng));
        let y = SensorImage::new(Array2::from_shape_fn((ny, nx), |_| rng.random::<f64>() - 0.5));
        let lhs = dot(op.apply(&x).unwrap().data.as_slice().unwrap(), y.data.as_slice().unwrap());
        let rhs = dot(x.data.as_slice().unwrap(), op.adjoint(&y).unwrap().data.as_slice().unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn tv_adjoint_identity(nz in 1usize..4, py in 1usize..7, px in 1usize..7, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random3((nz, py, px), &mut rng);
        let g = Array4::from_shape_fn((3, nz, py, px), |_| rng.random::<f64>() - 0.5);
        let lhs = dot(psi_apply(&x, Regularizer::Tv3d).as_slice().unwrap(), g.as_slice().unwrap());
        let rhs = dot(x.as_slice().unwrap(), psi_adjoint(&g, Regularizer::Tv3d).as_slice().unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn soft_threshold_shrinks_toward_zero(vals in prop::collection::vec(-10.0f64..10.0, 3), nu in 0.0f64..5.0) {
        let g = Array4::from_shape_vec((3, 1, 1, 1), vals.clone()).unwrap();
        let scalar = soft_threshold(&g, nu, Regularizer::Identity);
        for (t, v) in scalar.iter().zip(&vals) {
            prop_assert!(t.abs() <= v.abs());
            prop_assert!(t * v >= 0.0);
            prop_assert!((v.abs() - t.abs() - nu.min(v.abs())).abs() < 1e-12);
        }
        let vector = soft_threshold(&g, nu, Regularizer::Tv3d);
        let norm = vals.iter().map(|v| v * v).sum::<f64>().sqrt();
        let tnorm = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((tnorm - (norm - nu).max(0.0)).abs() < 1e-12);
    }

    #[test]
    fn depth_schedule_is_uniform_in_inverse_depth(z_min in 7.5f64..50.0, span in 1.0f64..500.0, n in 2usize..200) {
        let planes = depth_planes_between(z_min, z_min + span, n).unwrap();
        prop_assert_eq!(planes.len(), n);
        let step = 1.0 / planes[0] - 1.0 / planes[1];
        for w in planes.windows(2) {
            prop_assert!(w[1] > w[0]);
            prop_assert!((1.0 / w[0] - 1.0 / w[1] - step).abs() <= 1e-12);
        }
    }

    #[test]
    fn sparse_and_fft_paths_agree(ny in 2usize..8, nx in 2usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psfs = Array3::from_shape_fn((2, ny, nx), |_| rng.random::<f64>());
        let op = ConvOperator::new(&PsfStack::new(psfs, vec![10.0, 11.0]).unwrap()).unwrap();
        let (nz, py, px) = op.volume_shape();
        let voxels: Vec<Voxel> = (0..4)
            .map(|_| Voxel {
                plane: rng.random_range(0..nz),
                row: rng.random_range(0..py),
                col: rng.random_range(0..px),
                weight: rng.random::<f64>(),
            })
            .collect();
        let mut dense = Array3::zeros((nz, py, px));
        for v in &voxels {
            dense[(v.plane, v.row, v.col)] += v.weight;
        }
        let a = op.apply_sparse(&voxels).unwrap();
        let b = op.apply(&Volume::new(dense)).unwrap();
        let err = a.data.iter().zip(b.data.iter()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-12);
    }
}
