use criterion::{criterion_group, criterion_main, Criterion};
use sdfinv_bench::{desk_pipeline, frontal, latent};
use sdfinv_core::fusion::FusionMode;
use std::hint::black_box;

fn bench_inversion(c: &mut Criterion) {
    let p = desk_pipeline();
    let w = latent(&p.generator, 7);
    let source = frontal(&p.generator);
    let novel = p.generator.config().pose(0.4, 0.1).unwrap();
    let image = p.view(&w, &source).unwrap().image_hi;
    c.bench_function("global_encode", |b| b.iter(|| p.global.encode(black_box(&image)).unwrap()));
    let inv = p.invert(&image, &source).unwrap();
    c.bench_function("reconstruct_global", |b| b.iter(|| p.reconstruct(&inv, &novel, FusionMode::Global).unwrap()));
    c.bench_function("reconstruct_local", |b| b.iter(|| p.reconstruct(&inv, &novel, FusionMode::Local).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_inversion
}
criterion_main!(benches);
