use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use klora_core::synth::{layer_name, random_model, uniform_matrix, LayerSpec};
use klora_core::{build_schedule, matmul, topk_abs_sum, NamingConvention, ScheduleParams};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn topk(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut group = c.benchmark_group("topk_abs_sum");
    for n in [320, 640, 1280] {
        let m = uniform_matrix(&mut rng, n, n, 1.0);
        group.bench_with_input(BenchmarkId::from_parameter(n), &m, |b, m| {
            b.iter(|| topk_abs_sum(black_box(m), 64 * 64).unwrap())
        });
    }
    group.finish();
}

fn reconstruct(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut group = c.benchmark_group("matmul_rank64");
    group.sample_size(20);
    for n in [320, 640, 1280] {
        let up = uniform_matrix(&mut rng, n, 64, 1.0);
        let down = uniform_matrix(&mut rng, 64, n, 1.0);
        group.bench_with_input(
            BenchmarkId::from_parameter(n),
            &(up, down),
            |b, (up, down)| b.iter(|| matmul(black_box(up), black_box(down), "bench").unwrap()),
        );
    }
    group.finish();
}

fn schedule(c: &mut Criterion) {
    let specs: Vec<LayerSpec> = (0..16)
        .map(|i| LayerSpec {
            name: layer_name(i),
            out_features: 320,
            in_features: 320,
            rank: 16,
        })
        .collect();
    let content = random_model(3, &specs, None, NamingConvention::UpDown).unwrap();
    let style = random_model(4, &specs, None, NamingConvention::UpDown).unwrap();
    let params = ScheduleParams::default();
    let mut group = c.benchmark_group("build_schedule");
    group.sample_size(10);
    group.bench_function("16x320x320_r16", |b| {
        b.iter(|| build_schedule(black_box(&content), black_box(&style), &params).unwrap())
    });
    group.finish();
}

criterion_group!(benches, topk, reconstruct, schedule);
criterion_main!(benches);
