use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use motionsplat::blur::{ExposureTrajectory, Interpolation};
use motionsplat::render::{render, render_backward};
use motionsplat::tinynet::DenseNet;
use motionsplat::train::{skin_prior, step, LossWeights, Stage, StepInputs};
use motionsplat_bench::fixture;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn rendering(c: &mut Criterion) {
    let mut group = c.benchmark_group("render");
    group.sample_size(20);
    for gaussians in [800, 3000] {
        let fx = fixture(64, gaussians);
        let cam = fx.data.train_camera;
        let d = fx.model.deform(&fx.data.input_poses[0], &cam.center()).unwrap();
        group.bench_with_input(BenchmarkId::new("forward", gaussians), &d, |b, d| {
            b.iter(|| render(&cam, &d.splat_inputs(), &fx.model.render).unwrap())
        });
        let (img, tape) = render(&cam, &d.splat_inputs(), &fx.model.render).unwrap();
        let d_rgb = vec![1e-3; img.rgb().len()];
        let d_alpha = vec![1e-3; img.alpha().len()];
        group.bench_with_input(BenchmarkId::new("backward", gaussians), &tape, |b, tape| {
            b.iter(|| render_backward(tape, black_box(&d_rgb), black_box(&d_alpha)).unwrap())
        });
    }
    group.finish();
}

fn deformation(c: &mut Criterion) {
    let fx = fixture(64, 1500);
    let pose = &fx.data.input_poses[1];
    let eye = fx.data.train_camera.center();
    c.bench_function("deform/1500", |b| b.iter(|| fx.model.deform(black_box(pose), &eye).unwrap()));
}

fn dense_net(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let net = DenseNet::mlp(&[35, 128, 128, 128, 9], &mut rng).unwrap();
    let batch = 1024;
    let input: Vec<f64> = (0..35 * batch).map(|i| ((i * 37) % 101) as f64 / 101.0 - 0.5).collect();
    c.bench_function("tinynet/forward_batch_1024", |b| b.iter(|| net.forward_batch(black_box(&input), batch).unwrap()));
    let tape = net.forward_batch(&input, batch).unwrap();
    let d_out = vec![1e-2; 9 * batch];
    c.bench_function("tinynet/backward_batch_1024", |b| {
        b.iter(|| {
            let mut g = vec![0.0; net.num_params()];
            net.backward_batch(&tape, black_box(&d_out), &mut g).unwrap()
        })
    });
}

fn training_step(c: &mut Criterion) {
    let fx = fixture(64, 800);
    let frames = fx.data.train_frames();
    let prior = skin_prior(&fx.model);
    let traj = ExposureTrajectory::between(&fx.data.input_poses[0], &fx.data.input_poses[1], Interpolation::Slerp);
    let mut group = c.benchmark_group("step");
    group.sample_size(10);
    for (stage, n) in [(Stage::Sharp, 1), (Stage::Blur, 5), (Stage::Fusion, 5)] {
        let inputs = StepInputs {
            frame: &frames[0],
            frame_index: 0,
            trajectory: &traj,
            stage,
            virtual_poses: n,
            skin_prior: &prior,
            edges: &[],
            weights: LossWeights {
                mask: 0.1,
                skin: 1.0,
                isopos: 1.0,
                isocov: 100.0,
            },
        };
        group.bench_function(stage.to_string(), |b| b.iter(|| step(&fx.model, &inputs, true).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, rendering, deformation, dense_net, training_step);
criterion_main!(benches);
