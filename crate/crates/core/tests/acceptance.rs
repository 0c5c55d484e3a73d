//! End-to-end acceptance checks, one test per shipping criterion. Each
//! prints a single PASS/FAIL line with the measured numbers; run with
//! `cargo test --test acceptance -- --nocapture` to see all lines.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use syncnet_core::gbp::{build_factor_graph, GaussianMsg};
use syncnet_core::harness::{run_monte_carlo_on, write_results_to, Mode, RmseTable};
use syncnet_core::hybrid::{prepare_trial, run_hybrid};
use syncnet_core::kf::{kf_step, KfConfig, KfState};
use syncnet_core::model::{Scenario, Topology};
use syncnet_core::oracle::{exact_network_marginals, grid_pair_posterior, GridSpec};
use syncnet_core::ptp::{pair_statistic, run_exchange_set, run_training, PairStats, TimestampQuad};

const TRIALS: usize = 1000;

fn report(criterion: usize, name: &str, ok: bool, details: &str) {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("acceptance {criterion} ({name}): {verdict} - {details}");
}

fn rel_err(measured: f64, expected: f64) -> f64 {
    (measured - expected).abs() / expected.abs().max(1e-6)
}

/// Pair statistics with a back-solved noise variance so the fields stay
/// mutually consistent (factor_var = alpha^2 sigma2 / (4 K) at K = 10).
fn stats_for(alpha_hat: f64, delta_hat: f64, factor_var: f64) -> PairStats {
    PairStats {
        alpha_hat,
        sigma2_hat: factor_var * 40.0 / (alpha_hat * alpha_hat),
        delta_hat,
        k_used: 10,
        factor_var,
    }
}

fn final_rmse(table: &RmseTable, node_id: usize, last_iteration: usize) -> f64 {
    table
        .rows
        .iter()
        .find(|r| r.node_id == node_id && r.iteration == last_iteration)
        .expect("row exists")
        .rmse_ns
}

#[test]
fn criterion_1_whole_network_reproduction() {
    let s = Scenario::default();
    let start = Instant::now();
    let table = run_monte_carlo_on(&s, Mode::BpWhole, TRIALS, s.mc.seed, 1).unwrap();
    let runtime = start.elapsed().as_secs_f64();

    // convergence distribution over the same trials
    let whole = s.with_all_bp();
    let mut iters = Vec::with_capacity(TRIALS);
    for trial in 0..TRIALS as u64 {
        let world = whole.sample_instance(trial).unwrap();
        let trace = run_hybrid(&world, &whole, &mut whole.exchange_rng(trial)).unwrap();
        iters.push(trace.converged_at.unwrap_or(whole.bp.max_iters + 1));
    }
    iters.sort_unstable();
    let median = iters[TRIALS / 2];

    let last = s.bp.max_iters;
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for node in 2..=11 {
        let r = final_rmse(&table, node, last);
        lo = lo.min(r);
        hi = hi.max(r);
    }

    let conv_ok = (2..=6).contains(&median);
    let rmse_ok = lo >= 3.0 && hi <= 7.0;
    let runtime_ok = runtime < 60.0;
    report(
        1,
        "whole-network reproduction",
        conv_ok && rmse_ok && runtime_ok,
        &format!(
            "median convergence {median} iters (want 2..=6), \
             post-convergence rmse [{lo:.2}, {hi:.2}] ns (want within [3, 7]), \
             runtime {runtime:.1}s single-threaded (want < 60s)"
        ),
    );
    assert!(conv_ok, "median convergence {median} outside 2..=6");
    assert!(rmse_ok, "final rmse range [{lo:.2}, {hi:.2}] outside [3, 7]");
    assert!(runtime_ok, "runtime {runtime:.1}s over budget");
}

#[test]
fn criterion_2_hybrid_deterioration_and_backhaul_parity() {
    let s = Scenario::default();
    let whole = run_monte_carlo_on(&s, Mode::BpWhole, TRIALS, s.mc.seed, 0).unwrap();
    let hybrid = run_monte_carlo_on(&s, Mode::Hybrid, TRIALS, s.mc.seed, 0).unwrap();
    let last = s.bp.max_iters;

    let mut worst_backhaul = 0.0f64;
    for node in 2..=7 {
        let diff = (final_rmse(&hybrid, node, last) - final_rmse(&whole, node, last)).abs();
        worst_backhaul = worst_backhaul.max(diff);
    }
    let mut det_lo = f64::INFINITY;
    let mut det_hi = f64::NEG_INFINITY;
    for node in 8..=11 {
        let d = final_rmse(&hybrid, node, last) - final_rmse(&whole, node, last);
        det_lo = det_lo.min(d);
        det_hi = det_hi.max(d);
    }

    let det_ok = det_lo >= 1.0 && det_hi <= 3.0;
    let back_ok = worst_backhaul <= 0.5;
    report(
        2,
        "hybrid deterioration and backhaul parity",
        det_ok && back_ok,
        &format!(
            "edge-node rmse shift [{det_lo:.2}, {det_hi:.2}] ns (want within [1, 3]), \
             worst backhaul mismatch {worst_backhaul:.3} ns (want <= 0.5)"
        ),
    );
    assert!(back_ok, "backhaul mismatch {worst_backhaul:.3} ns over 0.5");
    assert!(det_ok, "edge-node deterioration [{det_lo:.2}, {det_hi:.2}] outside [1, 3]");
}

#[test]
fn criterion_3_bp_matches_exact_marginals() {
    // 20 random trees: converged BP must equal the exact marginals
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst_tree_rel = 0.0f64;
    for _ in 0..20 {
        let n: usize = rng.gen_range(3..=15);
        let mut edges = Vec::with_capacity(n - 1);
        for v in 1..n {
            let parent = rng.gen_range(0..v);
            // random orientation so both factor directions get exercised
            if rng.gen_bool(0.5) {
                edges.push((parent, v));
            } else {
                edges.push((v, parent));
            }
        }
        let topology = Topology::new(n, edges.clone(), 0, &[]).unwrap();
        let mut stats = BTreeMap::new();
        for &(a, b) in &edges {
            stats.insert(
                (a.min(b), a.max(b)),
                stats_for(
                    rng.gen_range(0.9995..1.0005),
                    rng.gen_range(-60.0..60.0),
                    rng.gen_range(0.2..4.0),
                ),
            );
        }
        let mut graph = build_factor_graph(&topology, &stats, 1.0).unwrap();
        let exact = exact_network_marginals(&graph).unwrap();
        let outcome = graph.run_bp(200, 1e-12).unwrap();
        assert!(outcome.converged, "tree BP failed to converge");
        for v in 1..n {
            let belief = graph.belief(v).unwrap();
            worst_tree_rel = worst_tree_rel
                .max(rel_err(belief.mean, exact.mean_ns[&v]))
                .max(rel_err(belief.variance(), exact.var_ns2[&v]));
        }
    }
    let tree_ok = worst_tree_rel <= 1e-9;

    // default loopy topology: converged means stay near the exact means
    let s = Scenario::default().with_all_bp();
    let mut worst_loopy_dev = 0.0f64;
    for trial in 0..10 {
        let world = s.sample_instance(trial).unwrap();
        let setup = prepare_trial(&world, &s, &mut s.exchange_rng(trial)).unwrap();
        let mut graph = setup.graph;
        let exact = exact_network_marginals(&graph).unwrap();
        graph.run_bp(s.bp.max_iters, s.bp.epsilon_ns).unwrap();
        for &v in graph.node_ids() {
            let dev = (graph.belief_mean(v).unwrap() - exact.mean_ns[&v]).abs();
            worst_loopy_dev = worst_loopy_dev.max(dev);
        }
    }
    let loopy_ok = worst_loopy_dev <= 0.5;

    report(
        3,
        "bp vs exact marginals",
        tree_ok && loopy_ok,
        &format!(
            "worst tree relative error {worst_tree_rel:.2e} (want <= 1e-9), \
             worst loopy mean deviation {worst_loopy_dev:.3} ns (want <= 0.5)"
        ),
    );
    assert!(tree_ok, "tree relative error {worst_tree_rel:.2e} over 1e-9");
    assert!(loopy_ok, "loopy mean deviation {worst_loopy_dev:.3} ns over 0.5");
}

#[test]
fn criterion_4_grid_posterior_matches_gaussian_algebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let grid = GridSpec::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let alpha = rng.gen_range(0.7..1.4);
        let delta = rng.gen_range(-60.0..60.0);
        let fv = rng.gen_range(0.2..5.0);
        let stats = stats_for(alpha, delta, fv);
        let prior_init =
            GaussianMsg::from_mean_var(rng.gen_range(-80.0..80.0), rng.gen_range(0.5..50.0));
        let prior_resp =
            GaussianMsg::from_mean_var(rng.gen_range(-80.0..80.0), rng.gen_range(0.5..50.0));

        let (mean, var) = grid_pair_posterior(&stats, &prior_init, &prior_resp, &grid).unwrap();
        let mapped = GaussianMsg::from_mean_var(
            (prior_init.mean - delta) / alpha,
            (prior_init.variance() + fv) / (alpha * alpha),
        );
        let expected = GaussianMsg::product([&prior_resp, &mapped]).unwrap();
        worst = worst
            .max(rel_err(mean, expected.mean))
            .max(rel_err(var, expected.variance()));
    }
    let ok = worst <= 1e-6;
    report(
        4,
        "grid posterior vs gaussian algebra",
        ok,
        &format!("worst relative error {worst:.2e} over 100 randomized cases (want <= 1e-6)"),
    );
    assert!(ok, "grid relative error {worst:.2e} over 1e-6");
}

#[test]
fn criterion_5_training_and_pair_statistic_consistency() {
    let s = Scenario::default();
    let world = s.sample_instance(0).unwrap();
    let ex = &s.exchange;

    let trained = run_training(
        &world,
        (0, 1),
        s.epoch_ns,
        100_000,
        ex.delta_t_ns,
        ex.turnaround_ns,
        &mut s.exchange_rng(0),
    )
    .unwrap();
    let sigma_ok = (trained.sigma2_hat - 32.0).abs() <= 32.0 * 0.05;

    // spread of the averaged statistic across independent stamp sets
    let n = 10_000usize;
    let mut deltas = Vec::with_capacity(n);
    for trial in 0..n as u64 {
        let mut rng = s.exchange_rng(trial);
        let quads =
            run_exchange_set(&world, (0, 1), s.epoch_ns, ex.k, ex.delta_t_ns, ex.turnaround_ns, &mut rng);
        deltas.push(pair_statistic(&quads, 1.0, 32.0).unwrap().delta_hat);
    }
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let var_ok = (var - 0.8).abs() <= 0.08;

    report(
        5,
        "training and pair-statistic consistency",
        sigma_ok && var_ok,
        &format!(
            "trained sigma2 {:.2} ns^2 (want 32 +- 5%), \
             statistic variance {var:.3} ns^2 over 10^4 sets (want 0.8 +- 10%)",
            trained.sigma2_hat
        ),
    );
    assert!(sigma_ok, "trained sigma2 {} outside 32 +- 5%", trained.sigma2_hat);
    assert!(var_ok, "statistic variance {var} outside 0.8 +- 10%");
}

#[test]
fn criterion_6_kalman_accuracy_and_covariance_health() {
    let s = Scenario::default();
    let ex = &s.exchange;
    let cfg = KfConfig::new(ex.delta_t_ns, 32.0).unwrap();
    let mut sq = 0.0;
    let mut psd_ok = true;
    for trial in 0..1000u64 {
        let world = s.sample_instance(trial).unwrap();
        let mut rng = s.exchange_rng(trial);
        let quads =
            run_exchange_set(&world, (0, 1), s.epoch_ns, 100, ex.delta_t_ns, ex.turnaround_ns, &mut rng);
        let mut state = KfState::init(&cfg);
        let mut prev: Option<TimestampQuad> = None;
        for q in &quads {
            state = kf_step(&state, q, prev.as_ref(), &cfg).unwrap();
            prev = Some(*q);
            let scale = state.p.a11.abs().max(state.p.a22.abs()).max(1.0);
            if state.p.a12 != state.p.a21 || state.p.eig_min_symmetric() < -1e-9 * scale {
                psd_ok = false;
            }
        }
        sq += (state.offset_ns - world.offset_vs_gm(1)).powi(2);
    }
    let rmse = (sq / 1000.0).sqrt();
    let single_shot_std = (32.0f64 / 4.0).sqrt(); // 2.83 ns
    let rmse_ok = rmse < 1.0 && rmse < single_shot_std;

    report(
        6,
        "kalman accuracy and covariance health",
        rmse_ok && psd_ok,
        &format!(
            "100-round offset rmse {rmse:.3} ns over 1000 trials \
             (want < 1 and < {single_shot_std:.2}), covariance symmetric PSD: {psd_ok}"
        ),
    );
    assert!(rmse_ok, "kf rmse {rmse:.3} not under 1 ns");
    assert!(psd_ok, "covariance left the symmetric PSD cone");
}

#[test]
fn criterion_7_thread_count_determinism() {
    let s = Scenario::default();
    let runs = 200;
    let mut outputs = Vec::new();
    for threads in [1, 2, 8] {
        let mut table = run_monte_carlo_on(&s, Mode::BpWhole, runs, s.mc.seed, threads).unwrap();
        table.extend(run_monte_carlo_on(&s, Mode::Hybrid, runs, s.mc.seed, threads).unwrap());
        let mut buf = Vec::new();
        write_results_to(&table, &mut buf).unwrap();
        outputs.push(buf);
    }
    let ok = outputs.windows(2).all(|w| w[0] == w[1]);
    report(
        7,
        "thread-count determinism",
        ok,
        &format!(
            "csv bytes identical across 1, 2 and 8 worker threads \
             ({} bytes, {runs} trials per mode): {ok}",
            outputs[0].len()
        ),
    );
    assert!(ok, "csv output depends on thread count");
}
