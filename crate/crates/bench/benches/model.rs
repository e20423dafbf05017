use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use refback::model::{forward, loss_and_grads};
use refback::task::{generate_sequence, TaskConfig};
use refback_bench::fixture;

fn bench_forward(c: &mut Criterion) {
    let (params, batch) = fixture(64, 1);
    c.bench_function("forward_e64", |b| {
        b.iter(|| forward(black_box(&params), black_box(&batch[0])).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("loss_and_grads_batch64");
    for e in [32, 64] {
        let (params, batch) = fixture(e, 64);
        group.bench_function(format!("e{e}"), |b| {
            b.iter(|| loss_and_grads(black_box(&params), black_box(&batch)).unwrap())
        });
    }
    group.finish();
}

fn bench_generate(c: &mut Criterion) {
    let cfg = TaskConfig::default();
    let mut seed = 0u64;
    c.bench_function("generate_sequence", |b| {
        b.iter(|| {
            seed += 1;
            generate_sequence(black_box(&cfg), seed).unwrap()
        })
    });
}

criterion_group!(benches, bench_forward, bench_train_step, bench_generate);
criterion_main!(benches);
