use criterion::{criterion_group, criterion_main, Criterion};
use kvnorm_bench::reference_model;
use kvnorm_core::kv_cache::{Budget, CompressionConfig, Policy};
use kvnorm_core::model::{decode_step, forward_train, prefill};
use std::hint::black_box;

fn bench_decode(c: &mut Criterion) {
    let model = reference_model(0);
    let prompt: Vec<u32> = (0..128).map(|i| (i * 7 % 256) as u32).collect();
    let mut group = c.benchmark_group("decode_step_after_128");
    for (name, config) in [
        ("none", CompressionConfig::none()),
        (
            "l2-low-ratio-0.5",
            CompressionConfig::with_policy(Policy::KeepLowL2, Some(Budget::Ratio(0.5))),
        ),
    ] {
        let state = prefill(&model, &prompt, config).unwrap();
        group.bench_function(name, |b| {
            b.iter_batched(
                || state.clone(),
                |mut s| decode_step(&model, &mut s, black_box(65)).unwrap(),
                criterion::BatchSize::SmallInput,
            )
        });
    }
    group.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let model = reference_model(0);
    let tokens: Vec<Vec<u32>> = (0..8).map(|b| (0..64).map(|i| ((i + b) % 256) as u32).collect()).collect();
    let targets: Vec<Vec<Option<u32>>> = tokens
        .iter()
        .map(|t| t.iter().map(|&x| Some((x + 1) % 256)).collect())
        .collect();
    let mut group = c.benchmark_group("forward_train");
    group.sample_size(10);
    group.bench_function("batch8x64", |b| b.iter(|| forward_train(&model, &tokens, &targets).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_decode, bench_train_step);
criterion_main!(benches);
