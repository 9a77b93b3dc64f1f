use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

use ttsa::batch::{map_indexed, map_items, Execution};
use ttsa::engine::RunConfig;
use ttsa::lagrangian::{kkt_oracle, random_instance, run_dual_sa, QuadraticProgram};
use ttsa::noise::NoiseSpec;

const MODES: [(&str, Execution); 2] = [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)];

fn dual_seeds(c: &mut Criterion) {
    let qp = QuadraticProgram::example_active();
    let seeds: Vec<u64> = (1..=16).collect();
    let mut group = c.benchmark_group("dual_sa_16_seeds_20k_steps");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                map_items(exec, &seeds, |&seed| {
                    let cfg = RunConfig::new(vec![0.0], vec![0.0], 20_000)
                        .with_noise(NoiseSpec::gaussian(0.05, seed), NoiseSpec::gaussian(0.05, seed + 1_000_000))
                        .with_log_stride(20_000);
                    black_box(run_dual_sa(&qp, &cfg, true).unwrap().mu_final)
                })
            })
        });
    }
    group.finish();
}

fn oracle_sweep(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let instances: Vec<QuadraticProgram> = (0..64)
        .map(|_| {
            let d = rng.random_range(1..=6);
            let k = rng.random_range(1..=d.min(4));
            random_instance(&mut rng, d, k)
        })
        .collect();
    let mut group = c.benchmark_group("kkt_oracle_64_instances");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| map_indexed(exec, instances.len(), |i| black_box(kkt_oracle(&instances[i]).unwrap().value)))
        });
    }
    group.finish();
}

criterion_group!(benches, dual_seeds, oracle_sweep);
criterion_main!(benches);
