//! Compare fuzzing throughput of the sequential worker loop against the
//! rayon-parallel fan-out on the generated vulnerable fixture.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use taforge::fixture::{self, DepLibManifest, FixtureManifest};
use taforge::fuzz::{self, FuzzConfig};
use taforge::harness::parse_spec;

fn campaign_config(workers: usize) -> FuzzConfig {
    FuzzConfig {
        seed: 11,
        max_iters: 4_000,
        workers,
        ..Default::default()
    }
}

fn bench_fuzz(c: &mut Criterion) {
    let fx = fixture::vulnerable_ta(&FixtureManifest::vulnerable_ta_default());
    let dep = fixture::dependency_lib(&DepLibManifest::default_lib());
    let spec = parse_spec(&fx.harness_text).unwrap();
    let seeds = vec![vec![0u8; 64]];
    let deps = [dep.elf.as_slice()];

    let mut group = c.benchmark_group("fuzz_campaign");
    group.sample_size(10);
    for workers in [1usize, 4] {
        group.bench_with_input(
            BenchmarkId::new("sequential", workers),
            &workers,
            |b, &workers| {
                let config = campaign_config(workers);
                b.iter(|| {
                    fuzz::fuzz_sequential(&fx.elf, &deps, &spec, &seeds, &config).unwrap()
                });
            },
        );
        #[cfg(feature = "parallel")]
        group.bench_with_input(
            BenchmarkId::new("parallel", workers),
            &workers,
            |b, &workers| {
                let config = campaign_config(workers);
                b.iter(|| fuzz::fuzz_parallel(&fx.elf, &deps, &spec, &seeds, &config).unwrap());
            },
        );
    }
    group.finish();
}

criterion_group!(benches, bench_fuzz);
criterion_main!(benches);
