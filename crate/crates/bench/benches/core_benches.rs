//! Hot-path throughput: stamp exchange, one BP sweep, KF batches, an
//! end-to-end trial, and the dense exact solver used for verification.

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use syncnet_bench::{default_fixture, whole_network_setup};
use syncnet_core::hybrid::run_hybrid;
use syncnet_core::kf::{kf_run_batch, KfConfig, KfState};
use syncnet_core::oracle::exact_network_marginals;
use syncnet_core::ptp::{run_exchange_set, run_training};

fn bench_exchange(c: &mut Criterion) {
    let (s, world, mut rng) = default_fixture();
    let ex = s.exchange;
    c.bench_function("exchange_set_10_rounds", |b| {
        b.iter(|| {
            black_box(run_exchange_set(
                &world,
                (0, 1),
                s.epoch_ns,
                ex.k,
                ex.delta_t_ns,
                ex.turnaround_ns,
                &mut rng,
            ))
        })
    });
    c.bench_function("training_1000_rounds", |b| {
        b.iter(|| {
            black_box(run_training(
                &world,
                (0, 1),
                s.epoch_ns,
                ex.training_rounds,
                ex.delta_t_ns,
                ex.turnaround_ns,
                &mut rng,
            ))
        })
    });
}

fn bench_bp_iteration(c: &mut Criterion) {
    let (_, _, setup) = whole_network_setup();
    c.bench_function("bp_iteration_11_nodes", |b| {
        b.iter_batched(
            || setup.graph.clone(),
            |mut g| {
                g.bp_iterate().unwrap();
                g
            },
            BatchSize::SmallInput,
        )
    });
}

fn bench_kf_batch(c: &mut Criterion) {
    let (s, world, mut rng) = default_fixture();
    let ex = s.exchange;
    let quads =
        run_exchange_set(&world, (3, 7), s.epoch_ns, 100, ex.delta_t_ns, ex.turnaround_ns, &mut rng);
    let cfg = KfConfig::new(ex.delta_t_ns, 32.0).unwrap();
    c.bench_function("kf_batch_100_rounds", |b| {
        b.iter(|| black_box(kf_run_batch(&KfState::init(&cfg), &quads, None, &cfg).unwrap()))
    });
}

fn bench_full_trial(c: &mut Criterion) {
    let (s, world, _) = default_fixture();
    c.bench_function("hybrid_trial_end_to_end", |b| {
        b.iter(|| {
            let mut rng = s.exchange_rng(0);
            black_box(run_hybrid(&world, &s, &mut rng).unwrap())
        })
    });
}

fn bench_exact_solver(c: &mut Criterion) {
    let (_, _, setup) = whole_network_setup();
    c.bench_function("exact_marginals_11_nodes", |b| {
        b.iter(|| black_box(exact_network_marginals(&setup.graph).unwrap()))
    });
}

criterion_group!(
    benches,
    bench_exchange,
    bench_bp_iteration,
    bench_kf_batch,
    bench_full_trial,
    bench_exact_solver
);
criterion_main!(benches);
