use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use lensless_core::optics::render_psf_at;
use lensless_core::{
    generate_diffuser, AdmmProblem, ConvOperator, DiffuserParams, Lattice, PsfStack, RenderOptions, SensorImage,
    SolverConfig, SystemGeometry, Volume,
};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_stack(nz: usize, n: usize, seed: u64) -> PsfStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let psfs = Array3::from_shape_fn((nz, n, n), |_| rng.random::<f64>());
    let mut stack = PsfStack::new(psfs, (0..nz).map(|k| 10.0 + k as f64).collect()).unwrap();
    stack.normalize().unwrap();
    stack
}

fn operator(c: &mut Criterion) {
    let mut g = c.benchmark_group("operator");
    for &(nz, n) in &[(8, 64), (8, 128)] {
        let op = ConvOperator::new(&random_stack(nz, n, 1)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Volume::new(Array3::from_shape_fn(op.volume_shape(), |_| rng.random::<f64>()));
        let b = SensorImage::new(Array2::from_shape_fn(op.sensor_shape(), |_| rng.random::<f64>()));
        g.bench_with_input(BenchmarkId::new("apply", format!("{n}x{n}x{nz}")), &x, |bch, x| {
            bch.iter(|| op.apply(x).unwrap())
        });
        g.bench_with_input(BenchmarkId::new("adjoint", format!("{n}x{n}x{nz}")), &b, |bch, b| {
            bch.iter(|| op.adjoint(b).unwrap())
        });
    }
    g.finish();
}

fn admm_step(c: &mut Criterion) {
    let mut g = c.benchmark_group("admm_step");
    g.sample_size(20);
    for &nz in &[4, 8, 16] {
        let op = ConvOperator::new(&random_stack(nz, 64, 3)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = SensorImage::new(Array2::from_shape_fn(op.sensor_shape(), |_| rng.random::<f64>()));
        let cfg = SolverConfig { lambda: Some(1e-3), ..Default::default() };
        let problem = AdmmProblem::new(&op, &b, 1e-3, cfg.regularizer).unwrap();
        let mut state = problem.initial_state(problem.default_penalties());
        g.bench_function(BenchmarkId::new("64x64", nz), |bch| bch.iter(|| problem.step(&mut state, &cfg).unwrap()));
    }
    g.finish();
}

fn render(c: &mut Criterion) {
    let geom = SystemGeometry {
        sensor_width_px: 128,
        sensor_height_px: 128,
        aperture_width: 0.5,
        aperture_height: 0.5,
        ..SystemGeometry::desk()
    };
    let params = DiffuserParams { feature_size: 60.0, slope: 0.3, ..Default::default() };
    let surface = generate_diffuser(1, &params, Lattice::covering(0.5, 0.5, 2.5)).unwrap();
    let mut g = c.benchmark_group("render");
    g.sample_size(10);
    g.bench_function("psf_1M_rays", |bch| {
        bch.iter(|| render_psf_at(&surface, (0.0, 0.0, 20.0), &geom, RenderOptions { rays: 1_000_000, seed: 0 }).unwrap())
    });
    g.finish();
}

criterion_group!(benches, operator, admm_step, render);
criterion_main!(benches);
