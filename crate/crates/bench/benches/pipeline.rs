use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use sadepth_bench::{desk_sequence, triplets};
use sadepth_core::trainer::{augment_sample, train_step, TrainConfig, TrainState};

fn desk(c: &mut Criterion) {
    let seq = desk_sequence();
    let cfg = TrainConfig::desk();
    let state = TrainState::new(&cfg).unwrap();
    let image = seq.frames[5].clone();
    c.bench_function("desk_predict", |b| b.iter(|| state.model.predict(black_box(&image)).unwrap()));

    let batch: Vec<_> = triplets(&seq, &[2, 3, 4, 5])
        .iter()
        .enumerate()
        .map(|(i, t)| augment_sample(t, &cfg, 0, i))
        .collect();
    let mut group = c.benchmark_group("desk_training");
    group.sample_size(10);
    group.bench_function("train_step_batch4", |b| {
        b.iter_batched(
            || state.clone(),
            |mut s| train_step(&mut s, black_box(&batch), &cfg, cfg.lr).unwrap(),
            criterion::BatchSize::LargeInput,
        )
    });
    group.finish();
}

criterion_group!(benches, desk);
criterion_main!(benches);
