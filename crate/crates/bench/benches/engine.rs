use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};

use tranclr::Setting;
use tranclr_bench::{fixture, matmul, random_matrix};

fn bench_matmul(c: &mut Criterion) {
    for n in [64, 192] {
        let (a, b) = (random_matrix(n, 1), random_matrix(n, 2));
        c.bench_function(&format!("matmul {n}x{n}"), |bench| bench.iter(|| matmul(n, black_box(&a), black_box(&b))));
    }
}

fn bench_model(c: &mut Criterion) {
    let f = fixture(Setting::Extractive, 64, 16);
    c.bench_function("encode d64", |b| {
        let mut i = 0;
        b.iter(|| {
            i += 1;
            f.encode(black_box(i))
        })
    });
    for setting in [Setting::Extractive, Setting::Generative] {
        let mut f = fixture(setting, 64, 16);
        c.bench_function(&format!("objective step {setting:?}"), |b| {
            let mut i = 0;
            b.iter(|| {
                i += 1;
                f.objective_step(black_box(i))
            })
        });
    }
}

criterion_group!(benches, bench_matmul, bench_model);
criterion_main!(benches);
