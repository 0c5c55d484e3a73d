//! Trial engine combining network-wide belief propagation with per-link
//! Kalman filters on a shared reference timeline.
//!
//! One trial runs three phases:
//!
//! 1. Bring-up: every link trains for `training_rounds` exchanges in
//!    parallel, producing the noise variance (and, when skews are
//!    simulated, the stamp-scaling ratio) used downstream.
//! 2. Stamp gathering: every BP link runs one K-round synchronization set
//!    and reduces it to its pair statistic. The factor graph is built once
//!    from these statistics.
//! 3. Iterations: belief propagation iterates on the fixed factors until
//!    the means settle or `max_iters` is hit. Each iteration is charged
//!    `(K + 1) * delta_t` of reference time (a K-round stamp slot plus one
//!    message hop), during which every KF node completes K + 1 filter
//!    rounds against its parent. Estimates are sampled at iteration
//!    boundaries; after convergence the beliefs freeze while the filters
//!    keep running.
//!
//! A KF node's end-to-end offset estimate composes its parent's belief
//! mean with its own filtered offset relative to that parent, so its error
//! decomposes exactly into (parent BP error) + (pairwise filter error).
//! With no KF nodes the engine reduces to plain network-wide BP, which is
//! how the whole-network mode runs.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::gbp::{build_factor_graph, FactorGraph};
use crate::kf::{kf_run_batch, KfConfig, KfState};
use crate::model::{ExchangeParams, NodeLabel, Scenario, Topology, TrialRng, WorldInstance};
use crate::ptp::{pair_statistic, run_exchange_set, run_training, PairStats, TimestampQuad, TrainingResult};

/// Lower bound applied to trained noise variances so noiseless worlds
/// still yield proper Gaussians. A picosecond-squared is "exact" for this
/// domain yet large enough that the filter's innovation determinant stays
/// clear of f64 rounding under the diffuse initial covariance.
const SIGMA2_FLOOR_NS2: f64 = 1e-6;

/// Node partition plus the exchange-rate relation between the two
/// estimator domains.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HybridSchedule {
    /// Filter rounds completed by every KF node per BP iteration.
    pub kf_rounds_per_bp_iteration: usize,
    pub bp_set: Vec<usize>,
    pub kf_set: Vec<usize>,
}

impl HybridSchedule {
    pub fn new(topology: &Topology, exchange: &ExchangeParams) -> Result<Self> {
        let (bp_set, kf_set) = partition_domains(topology)?;
        Ok(HybridSchedule {
            // one K-round stamp slot plus one message hop per iteration
            kf_rounds_per_bp_iteration: exchange.k + 1,
            bp_set,
            kf_set,
        })
    }
}

/// Split nodes by label, validating the topology invariants (connected
/// BP subgraph containing the grand master, each KF node linked to a BP
/// parent).
pub fn partition_domains(topology: &Topology) -> Result<(Vec<usize>, Vec<usize>)> {
    topology.validate()?;
    Ok((topology.bp_nodes(), topology.kf_nodes()))
}

/// Everything a trial fixes before the first BP iteration.
#[derive(Debug, Clone)]
pub struct TrialSetup {
    /// Bring-up results per link, keyed by unordered node pair.
    pub training: BTreeMap<(usize, usize), TrainingResult>,
    /// Synchronization-set statistics per BP link.
    pub stats: BTreeMap<(usize, usize), PairStats>,
    pub graph: FactorGraph,
    /// Reference time at which phase 3 starts.
    pub t_sync_ns: f64,
}

/// Per-iteration decomposition of one KF node's end-to-end estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct KfTrace {
    pub parent: usize,
    /// `(parent belief mean, filtered offset vs parent)` at each BP
    /// iteration boundary; the composed estimate is their sum once the
    /// parent is informative.
    pub parts: Vec<(Option<f64>, f64)>,
}

/// Offset-estimate traces of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialTrace {
    /// `estimates[l][v]`: node v's offset estimate (ns, vs reference) at
    /// the end of BP iteration l+1; None while no information reached v.
    pub estimates: Vec<Vec<Option<f64>>>,
    /// First iteration whose largest belief-mean change was within
    /// epsilon; None if the iteration budget ran out first.
    pub converged_at: Option<usize>,
    pub last_change_ns: f64,
    /// Composition bookkeeping for each KF node.
    pub kf_parts: BTreeMap<usize, KfTrace>,
}

/// Run bring-up and stamp gathering, fixing the factor graph for a trial.
/// Consumes the exchange stream in a deterministic order: training for
/// every link in edge-list order, then one synchronization set per BP
/// link in edge-list order.
pub fn prepare_trial(
    world: &WorldInstance,
    scenario: &Scenario,
    rng: &mut TrialRng,
) -> Result<TrialSetup> {
    scenario.validate()?;
    if world.topology != scenario.topology {
        return Err(Error::Config(
            "world was sampled from a different topology than the scenario's".into(),
        ));
    }
    let topology = &world.topology;
    let ex = &scenario.exchange;

    let t_train = scenario.epoch_ns;
    let mut training = BTreeMap::new();
    for &(a, b) in &topology.edges {
        let result = run_training(
            world,
            (a, b),
            t_train,
            ex.training_rounds,
            ex.delta_t_ns,
            ex.turnaround_ns,
            rng,
        )?;
        training.insert((a.min(b), a.max(b)), result);
    }

    // Stamp-scaling ratios only help when rate differences are simulated;
    // otherwise their own estimation noise would leak into delta_hat.
    let use_trained_alpha = scenario.skew_enabled();
    let t_stamp = t_train + ex.training_rounds as f64 * ex.delta_t_ns;
    let mut stats = BTreeMap::new();
    for (a, b) in topology.bp_edges() {
        let trained = &training[&(a.min(b), a.max(b))];
        let alpha_hat = if use_trained_alpha { trained.alpha_hat } else { 1.0 };
        let sigma2_hat = trained.sigma2_hat.max(SIGMA2_FLOOR_NS2);
        let quads =
            run_exchange_set(world, (a, b), t_stamp, ex.k, ex.delta_t_ns, ex.turnaround_ns, rng);
        stats.insert((a.min(b), a.max(b)), pair_statistic(&quads, alpha_hat, sigma2_hat)?);
    }

    let graph = build_factor_graph(topology, &stats, scenario.bp.damping)?;
    Ok(TrialSetup { training, stats, graph, t_sync_ns: t_stamp })
}

/// One KF node's exchange loop against its parent. The parent always
/// initiates so the filtered offset is the node's clock minus the
/// parent's.
struct KfLane {
    node: usize,
    parent: usize,
    cfg: KfConfig,
    state: KfState,
    prev_tail: Option<TimestampQuad>,
}

/// Run one full trial and return its estimate traces. Draws after
/// [`prepare_trial`] happen in batches of `K + 1` filter rounds per KF
/// link (edge-list order) per BP iteration, for every iteration up to
/// `max_iters` regardless of convergence.
pub fn run_hybrid(
    world: &WorldInstance,
    scenario: &Scenario,
    rng: &mut TrialRng,
) -> Result<TrialTrace> {
    let schedule = HybridSchedule::new(&world.topology, &scenario.exchange)?;
    let setup = prepare_trial(world, scenario, rng)?;
    let TrialSetup { training, graph: mut bp_graph, t_sync_ns, .. } = setup;
    let topology = &world.topology;
    let ex = &scenario.exchange;

    let mut lanes = Vec::new();
    for &(a, b) in &topology.edges {
        let (parent, node) = match (topology.label(a), topology.label(b)) {
            (NodeLabel::Bp, NodeLabel::Kf) => (a, b),
            (NodeLabel::Kf, NodeLabel::Bp) => (b, a),
            _ => continue,
        };
        let sigma2 = training[&(a.min(b), a.max(b))].sigma2_hat.max(SIGMA2_FLOOR_NS2);
        let cfg = KfConfig::new(ex.delta_t_ns, sigma2)?;
        lanes.push(KfLane { node, parent, cfg, state: KfState::init(&cfg), prev_tail: None });
    }

    let rounds_per_iter = schedule.kf_rounds_per_bp_iteration;
    let mut estimates = Vec::with_capacity(scenario.bp.max_iters);
    let mut kf_parts: BTreeMap<usize, KfTrace> = lanes
        .iter()
        .map(|lane| (lane.node, KfTrace { parent: lane.parent, parts: Vec::new() }))
        .collect();
    let mut converged_at = None;
    let mut last_change_ns = f64::INFINITY;

    for l in 1..=scenario.bp.max_iters {
        let t_window = t_sync_ns + ((l - 1) * rounds_per_iter) as f64 * ex.delta_t_ns;
        for lane in &mut lanes {
            let quads = run_exchange_set(
                world,
                (lane.parent, lane.node),
                t_window,
                rounds_per_iter,
                ex.delta_t_ns,
                ex.turnaround_ns,
                rng,
            );
            lane.state = kf_run_batch(&lane.state, &quads, lane.prev_tail.as_ref(), &lane.cfg)?;
            lane.prev_tail = quads.last().copied();
        }

        // beliefs freeze once converged; the filters above keep running
        if converged_at.is_none() {
            let change = bp_graph.bp_iterate()?;
            last_change_ns = change;
            if change <= scenario.bp.epsilon_ns {
                converged_at = Some(l);
            }
        }

        let mut row = vec![None; topology.node_count];
        for &v in &schedule.bp_set {
            row[v] = bp_graph.belief_mean(v);
        }
        for lane in &lanes {
            let parent_mean = bp_graph.belief_mean(lane.parent);
            row[lane.node] = parent_mean.map(|m| m + lane.state.offset_ns);
            kf_parts
                .get_mut(&lane.node)
                .expect("lane registered")
                .parts
                .push((parent_mean, lane.state.offset_ns));
        }
        estimates.push(row);
    }

    Ok(TrialTrace { estimates, converged_at, last_change_ns, kf_parts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::default_topology;
    use approx::assert_abs_diff_eq;

    fn backbone_only_scenario() -> Scenario {
        let mut s = Scenario::default();
        s.topology = Topology::new(
            7,
            vec![(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 0), (1, 5), (2, 4)],
            0,
            &[],
        )
        .unwrap();
        s
    }

    fn quiet_scenario() -> Scenario {
        let mut s = Scenario::default();
        s.link.t_std_ns = 0.0;
        s.link.r_std_ns = 0.0;
        s
    }

    #[test]
    fn partition_follows_labels() {
        let t = default_topology();
        let (bp, kf) = partition_domains(&t).unwrap();
        assert_eq!(bp, vec![0, 1, 2, 3, 4, 5, 6]);
        assert_eq!(kf, vec![7, 8, 9, 10]);

        let (bp, kf) = partition_domains(&t.relabel_all_bp()).unwrap();
        assert_eq!(bp.len(), 11);
        assert!(kf.is_empty());

        // KF node whose parent link is missing fails validation
        let broken = Topology {
            node_count: 3,
            edges: vec![(0, 1)],
            gm: 0,
            kf_parents: vec![None, None, Some(1)],
        };
        assert!(partition_domains(&broken).is_err());
    }

    #[test]
    fn schedule_outpaces_bp_by_at_least_k() {
        let s = Scenario::default();
        let schedule = HybridSchedule::new(&s.topology, &s.exchange).unwrap();
        assert_eq!(schedule.kf_rounds_per_bp_iteration, 11);
        assert!(schedule.kf_rounds_per_bp_iteration >= s.exchange.k);
    }

    #[test]
    fn setup_trains_every_link_and_builds_the_graph() {
        let s = Scenario::default();
        let world = s.sample_instance(0).unwrap();
        let setup = prepare_trial(&world, &s, &mut s.exchange_rng(0)).unwrap();
        assert_eq!(setup.training.len(), 13);
        assert_eq!(setup.stats.len(), 9);
        assert_eq!(setup.graph.variable_count(), 7);
        assert_eq!(setup.graph.factor_count(), 9);
        assert_eq!(setup.t_sync_ns, 1e9 + 1000.0 * 1e6);
        for stats in setup.stats.values() {
            assert_eq!(stats.alpha_hat, 1.0);
            // trained variance is close to the true 32, so the factor
            // variance sits near sigma^2 / (4K) = 0.8
            assert_abs_diff_eq!(stats.factor_var, 0.8, epsilon = 0.15);
        }
    }

    #[test]
    fn setup_rejects_foreign_worlds() {
        let s = Scenario::default();
        let world = backbone_only_scenario().sample_instance(0).unwrap();
        assert!(matches!(
            prepare_trial(&world, &s, &mut s.exchange_rng(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn engine_without_kf_nodes_is_plain_bp() {
        let s = backbone_only_scenario();
        let world = s.sample_instance(5).unwrap();
        let a = run_hybrid(&world, &s, &mut s.exchange_rng(5)).unwrap();
        assert!(a.kf_parts.is_empty());

        // relabeling a KF-free topology is the identity transform
        let s2 = s.with_all_bp();
        let world2 = s2.sample_instance(5).unwrap();
        let b = run_hybrid(&world2, &s2, &mut s2.exchange_rng(5)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn backbone_estimates_match_across_modes() {
        // leaf factors carry no information toward the backhaul, and all
        // backhaul noise draws happen before any leaf draws, so backbone
        // traces agree bit-for-bit until one mode's earlier freeze
        let hybrid = Scenario::default();
        let whole = hybrid.with_all_bp();
        let trial = 2;
        let wh = hybrid.sample_instance(trial).unwrap();
        let ww = whole.sample_instance(trial).unwrap();
        let th = run_hybrid(&wh, &hybrid, &mut hybrid.exchange_rng(trial)).unwrap();
        let tw = run_hybrid(&ww, &whole, &mut whole.exchange_rng(trial)).unwrap();

        let frozen = th
            .converged_at
            .unwrap_or(usize::MAX)
            .min(tw.converged_at.unwrap_or(usize::MAX));
        for (l, (row_h, row_w)) in th.estimates.iter().zip(&tw.estimates).enumerate() {
            for v in 0..7 {
                if l < frozen {
                    assert_eq!(row_h[v], row_w[v], "node {v} iteration {}", l + 1);
                } else if let (Some(a), Some(b)) = (row_h[v], row_w[v]) {
                    // post-freeze drift is bounded by a few epsilon-sized
                    // belief updates
                    assert_abs_diff_eq!(a, b, epsilon = 0.5);
                }
            }
        }
    }

    #[test]
    fn kf_error_composes_from_parent_and_pairwise_parts() {
        let s = Scenario::default();
        let trial = 3;
        let world = s.sample_instance(trial).unwrap();
        let trace = run_hybrid(&world, &s, &mut s.exchange_rng(trial)).unwrap();
        assert_eq!(trace.kf_parts.len(), 4);
        for (&node, kf) in &trace.kf_parts {
            assert_eq!(world.topology.kf_parents[node], Some(kf.parent));
            assert_eq!(kf.parts.len(), s.bp.max_iters);
            let true_rel = world.offset_vs_gm(node) - world.offset_vs_gm(kf.parent);
            for (l, &(parent_mean, kf_offset)) in kf.parts.iter().enumerate() {
                let est = trace.estimates[l][node];
                match parent_mean {
                    None => assert!(est.is_none()),
                    Some(pm) => {
                        let est = est.unwrap();
                        assert_eq!(est, pm + kf_offset);
                        let end_to_end = est - world.offset_vs_gm(node);
                        let parent_err = pm - world.offset_vs_gm(kf.parent);
                        let pairwise_err = kf_offset - true_rel;
                        assert_abs_diff_eq!(
                            end_to_end,
                            parent_err + pairwise_err,
                            epsilon = 1e-9
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_world_synchronizes_exactly() {
        let s = quiet_scenario();
        let world = s.sample_instance(1).unwrap();
        let trace = run_hybrid(&world, &s, &mut s.exchange_rng(1)).unwrap();
        assert!(trace.converged_at.is_some());
        let last = trace.estimates.last().unwrap();
        for v in 0..s.topology.node_count {
            let err = last[v].unwrap() - world.offset_vs_gm(v);
            assert_abs_diff_eq!(err, 0.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn default_trial_converges_and_pads_to_max_iters() {
        let s = Scenario::default();
        let world = s.sample_instance(0).unwrap();
        let trace = run_hybrid(&world, &s, &mut s.exchange_rng(0)).unwrap();
        assert_eq!(trace.estimates.len(), s.bp.max_iters);
        let at = trace.converged_at.expect("20 iterations suffice here");
        assert!(trace.last_change_ns <= s.bp.epsilon_ns);
        // frozen beliefs keep the post-convergence rows constant
        for l in at..s.bp.max_iters {
            for &v in &[0usize, 1, 2, 3, 4, 5, 6] {
                assert_eq!(trace.estimates[l][v], trace.estimates[at - 1][v]);
            }
        }
        // estimates become informative in breadth-first order from the
        // anchor: its direct neighbors after the first iteration
        assert_eq!(trace.estimates[0][0], Some(0.0));
        assert!(trace.estimates[0][1].is_some());
        assert!(trace.estimates[0][6].is_some());
        assert!(trace.estimates[0][3].is_none());
        // leaves wait for their parents to hear from the anchor
        assert!(trace.estimates[0][7].is_none());
        assert!(trace.estimates[s.bp.max_iters - 1][7].is_some());
    }
}
