use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use embmapper_core::mapper::{build_mapper, Epsilon, MapperParams};
use embmapper_core::synth::{generate, Shape, SynthConfig};

fn pools() -> Vec<(String, rayon::ThreadPool)> {
    let default = rayon::ThreadPoolBuilder::new().build().unwrap();
    let label = format!("default-{}", default.current_num_threads());
    vec![("single".into(), rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap()), (label, default)]
}

fn mapper(c: &mut Criterion) {
    let ds = generate(&SynthConfig { shape: Shape::Blobs, n: 3000, k: 4, dim: 16, ..Default::default() }).unwrap();
    let cases = [
        ("classical-auto", MapperParams::classical(10, 0.3, 3, Epsilon::Auto)),
        ("classical-fixed", MapperParams::classical(10, 0.3, 3, Epsilon::Fixed(1.5))),
        ("ball", MapperParams::ball(2.0)),
    ];
    let mut group = c.benchmark_group("mapper");
    group.sample_size(10);
    for (name, params) in &cases {
        for (label, pool) in pools() {
            group.bench_with_input(BenchmarkId::new(*name, &label), params, |b, p| {
                pool.install(|| b.iter(|| build_mapper(&ds, 1, p).unwrap()))
            });
        }
    }
    group.finish();
}

criterion_group!(benches, mapper);
criterion_main!(benches);
