//! Data-parallel core vs sequential fallback.
//!
//! The rayon paths are gated behind the `parallel` feature (on by
//! default). Benchmarks run each workload twice: on the global pool and
//! inside a single-thread pool, which matches the sequential fallback's
//! work order. For the true fallback codepath, run
//! `cargo bench --no-default-features` and compare group medians.

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

use onh_core::phantom::{generate, PhantomConfig};
use onh_core::surfaces::extract_boundaries;
use onh_core::volume::TissueLabel;

fn bench_config() -> PhantomConfig {
    let mut cfg = PhantomConfig::default().with_scan_grid(192, 49, 256);
    cfg.noise_sigma_um = 3.0;
    cfg.seed = 5;
    cfg
}

fn run_pools<F: Fn() + Sync>(c: &mut Criterion, group: &str, work: F) {
    let mut g = c.benchmark_group(group);
    g.sample_size(10);
    g.bench_function("threads-all", |b| b.iter(&work));
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .expect("single-thread pool");
    g.bench_function("threads-1", |b| b.iter(|| single.install(&work)));
    g.finish();
}

fn phantom_generation(c: &mut Criterion) {
    let cfg = bench_config();
    run_pools(c, "phantom_generate", || {
        black_box(generate(black_box(&cfg)).unwrap());
    });
}

fn boundary_extraction(c: &mut Criterion) {
    let volume = generate(&bench_config()).unwrap();
    run_pools(c, "extract_boundaries", || {
        black_box(extract_boundaries(black_box(&volume), TissueLabel::RnflPlt));
    });
}

criterion_group!(benches, phantom_generation, boundary_extraction);
criterion_main!(benches);
