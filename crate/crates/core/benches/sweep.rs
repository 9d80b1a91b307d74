use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use idmac_core::experiment::{cmd_sweep_size, ExperimentConfig};

fn config(parallel: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.sweep.sizes = vec![4, 8, 16, 32];
    cfg.seeds = vec![1, 2, 3];
    cfg.parallel = parallel;
    cfg
}

fn sweep(c: &mut Criterion) {
    let mut group = c.benchmark_group("sweep_size");
    group.sample_size(10);
    for (name, parallel) in [("sequential", false), ("parallel", true)] {
        let cfg = config(parallel);
        group.bench_with_input(BenchmarkId::from_parameter(name), &cfg, |b, cfg| {
            b.iter(|| cmd_sweep_size(cfg).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
