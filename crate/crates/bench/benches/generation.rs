use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use nar_bench::fixture;
use nar_core::sample::{generate_batch, generate_raster_batch, SamplingConfig};
use nar_core::Mode;

fn generation(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_16x16");
    group.sample_size(10);
    let nar = fixture(Mode::Nar, &[16, 16], 64);
    let raster = fixture(Mode::Raster, &[16, 16], 64);
    let shape = nar.config().shape.clone();
    let sampling = SamplingConfig::for_shape(&shape, 0);
    for batch in [1usize, 4] {
        let classes: Vec<usize> = (0..batch).collect();
        group.throughput(Throughput::Elements(batch as u64));
        group.bench_with_input(BenchmarkId::new("nar", batch), &classes, |b, classes| {
            b.iter(|| generate_batch(&nar, classes, &shape, &sampling).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("raster", batch), &classes, |b, classes| {
            b.iter(|| generate_raster_batch(&raster, classes, &shape, &sampling).unwrap())
        });
    }
    group.finish();
}

fn video(c: &mut Criterion) {
    let mut group = c.benchmark_group("generate_4x8x8");
    group.sample_size(10);
    let nar = fixture(Mode::Nar, &[4, 8, 8], 32);
    let shape = nar.config().shape.clone();
    let sampling = SamplingConfig::for_shape(&shape, 0);
    group.bench_function("nar", |b| {
        b.iter(|| generate_batch(&nar, &[0], &shape, &sampling).unwrap())
    });
    group.finish();
}

criterion_group!(benches, generation, video);
criterion_main!(benches);
