use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use framewalk::ballsim::{generate_clip, init_world, step, ClipSpec, SimParams};
use framewalk::evalsuite::isomap_embed;
use framewalk::framegan::{prior_latents, FrameGenSpec, FrameGenerator};
use framewalk::ganloss::{ProjectionBank, ProjectionGeom};
use framewalk::nn::params::normal;

fn simulator(c: &mut Criterion) {
    let params = SimParams::default();
    let world = init_world(7, 3, &params).unwrap();
    c.bench_function("sim/step_3_balls", |b| b.iter(|| step(black_box(&world), 1.0)));
    let spec = ClipSpec { n_balls: 3, n_frames: 30, height: 32, width: 32, sim: params };
    c.bench_function("sim/clip_30x32x32", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            generate_clip(10, i, &spec).unwrap()
        })
    });
}

fn projection(c: &mut Criterion) {
    let bank = ProjectionBank::new(8, ProjectionGeom::default(), 3).unwrap();
    let mut g = group(c, "projection");
    for batch in [8usize, 64] {
        let mut rng = rand_seeded(batch as u64);
        let x = normal::<f32, _>(&mut rng, &[batch, 1, 32, 32], 0.0, 1.0);
        g.bench_with_input(BenchmarkId::from_parameter(batch), &x, |b, x| b.iter(|| bank.apply(0, x).unwrap()));
    }
    g.finish();
}

fn isomap(c: &mut Criterion) {
    let mut rng = rand_seeded(1);
    let raw = normal::<f64, _>(&mut rng, &[300, 100], 0.0, 1.0);
    let points: Vec<Vec<f64>> = raw.data().chunks_exact(100).map(<[f64]>::to_vec).collect();
    c.bench_function("isomap/300x100_k10", |b| b.iter(|| isomap_embed(black_box(&points), 10, 2).unwrap()));
}

fn frame_generator(c: &mut Criterion) {
    let gf = FrameGenerator::new(&FrameGenSpec::default(), 5).unwrap();
    let mut g = group(c, "frame_generator_decode");
    g.sample_size(10);
    for batch in [1usize, 64] {
        let z = prior_latents(batch, gf.spec().latent_dim, 9);
        g.bench_with_input(BenchmarkId::from_parameter(batch), &z, |b, z| b.iter(|| gf.decode(z).unwrap()));
    }
    g.finish();
}

fn group<'a>(c: &'a mut Criterion, name: &str) -> criterion::BenchmarkGroup<'a, criterion::measurement::WallTime> {
    c.benchmark_group(name)
}

fn rand_seeded(seed: u64) -> impl rand::Rng {
    <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed)
}

criterion_group!(benches, simulator, projection, isomap, frame_generator);
criterion_main!(benches);
