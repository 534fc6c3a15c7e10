//! Hot paths: the rank-one covariance update dominating the inner loop, the
//! exact DP solve behind every oracle query, environment generation with
//! gap certification, and complete desk-scale runs.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use linq_bench::{desk_scale_config, linear_environment, tabular_environment};
use linq_core::envgen::{self, EnvKind, EnvSpec};
use linq_core::harness::run_experiment;
use linq_core::linalg::CovarianceState;
use linq_core::mdp::dp_solve;
use rand_core::RngCore;
use rand_xoshiro::rand_core::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

fn unit_ball_features(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut unit = move || (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
    (0..count)
        .map(|_| {
            let mut phi: Vec<f64> = (0..dim).map(|_| 2.0 * unit() - 1.0).collect();
            let norm = phi.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1.0 {
                phi.iter_mut().for_each(|x| *x /= norm);
            }
            phi
        })
        .collect()
}

fn bench_rank_one_update(c: &mut Criterion) {
    for dim in [2usize, 8] {
        let features = unit_ball_features(dim, 256, dim as u64);
        c.bench_function(&format!("rank_one_update_d{dim}"), |b| {
            b.iter_batched(
                || CovarianceState::new(dim),
                |mut cov| {
                    for phi in &features {
                        cov.rank_one_update(black_box(phi)).unwrap();
                    }
                    cov
                },
                BatchSize::SmallInput,
            );
        });
    }
}

fn bench_dp_solve(c: &mut Criterion) {
    let tabular = tabular_environment();
    let linear = linear_environment();
    c.bench_function("dp_solve_tabular_h2_s3_a2", |b| {
        b.iter(|| dp_solve(black_box(tabular.mdp())));
    });
    c.bench_function("dp_solve_linear_h3_s4_a3", |b| {
        b.iter(|| dp_solve(black_box(linear.mdp())));
    });
}

fn bench_generate(c: &mut Criterion) {
    let spec = EnvSpec::new(EnvKind::TabularOnehot, 2, 3, 2, 6, 0.05, 17);
    c.bench_function("generate_tabular_with_certification", |b| {
        b.iter(|| envgen::generate(black_box(&spec)).unwrap());
    });
}

fn bench_full_run(c: &mut Criterion) {
    let env = tabular_environment();
    let config = desk_scale_config(40);
    let mut group = c.benchmark_group("runs");
    group.sample_size(20);
    group.bench_function("linq_40_episodes_all_monitors", |b| {
        b.iter(|| run_experiment(black_box(&env), black_box(&config)).unwrap());
    });
    group.finish();
}

criterion_group!(
    benches,
    bench_rank_one_update,
    bench_dp_solve,
    bench_generate,
    bench_full_run
);
criterion_main!(benches);
