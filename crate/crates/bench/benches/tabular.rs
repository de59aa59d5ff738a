use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softimit_core::mdp::{build_gridworld, occupancy_measure, GridSpec};
use softimit_core::soft_rl::{invert_policy_to_reward, soft_value_iteration};
use softimit_core::{TabularMdp, TabularPolicy};

fn soft_vi(c: &mut Criterion) {
    let grid = build_gridworld(&GridSpec::dense_default()).unwrap();
    let prior = TabularPolicy::uniform(grid.n_states(), grid.n_actions());
    c.bench_function("soft_vi_dense_8x8", |b| {
        b.iter(|| soft_value_iteration(black_box(&grid), &prior, 1.0, 1e-10, 10_000).unwrap())
    });

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let random = TabularMdp::random(20, 5, 0.99, &mut rng).unwrap();
    let prior = TabularPolicy::uniform(20, 5);
    c.bench_function("soft_vi_random_20x5_gamma_0.99", |b| {
        b.iter(|| soft_value_iteration(black_box(&random), &prior, 0.1, 1e-10, 100_000).unwrap())
    });
}

fn inversion_and_occupancy(c: &mut Criterion) {
    let grid = build_gridworld(&GridSpec::sparse_default()).unwrap();
    let prior = TabularPolicy::uniform(grid.n_states(), grid.n_actions());
    let solution = soft_value_iteration(&grid, &prior, 1.0, 1e-10, 10_000).unwrap();
    c.bench_function("invert_policy_sparse_8x8", |b| {
        b.iter(|| invert_policy_to_reward(&solution.policy, &solution.v_table, &prior, 1.0, black_box(&grid)).unwrap())
    });
    c.bench_function("occupancy_sparse_8x8", |b| {
        b.iter(|| occupancy_measure(black_box(&grid), &solution.policy).unwrap())
    });
}

criterion_group!(benches, soft_vi, inversion_and_occupancy);
criterion_main!(benches);
