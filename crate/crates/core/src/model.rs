//! Simulation state: affine clocks, network topology, link noise models,
//! scenario parameters and seeded world sampling.
//!
//! Reproducibility: every random quantity is drawn from a ChaCha8 stream
//! keyed by the scenario's master seed (via `SeedableRng::seed_from_u64`,
//! i.e. SplitMix64 expansion). Trial `i` uses ChaCha stream `2 * i` for
//! world sampling and stream `2 * i + 1` for exchange noise, so a sampled
//! world is a pure function of `(master_seed, trial_index)` and trials can
//! be simulated in any order or in parallel without changing results.
//! Gaussian variates use `rand_distr::Normal` (Ziggurat method).

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// RNG handed to exchange simulation; fixed concrete type so draw
/// sequences are stable for a given seed.
pub type TrialRng = ChaCha8Rng;

/// Free-running affine clock: `read(t) = skew * t + offset_ns`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockState {
    /// Dimensionless rate against reference time; 1.0 is a perfect clock.
    pub skew: f64,
    /// Offset against reference time at t = 0, in nanoseconds.
    pub offset_ns: f64,
}

impl ClockState {
    pub fn new(skew: f64, offset_ns: f64) -> Self {
        ClockState { skew, offset_ns }
    }

    /// Local clock reading at reference time `t_ns`.
    pub fn read(&self, t_ns: f64) -> f64 {
        self.skew * t_ns + self.offset_ns
    }
}

/// Role of a node in the hybrid synchronization scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeLabel {
    /// Participates in network-wide belief propagation.
    Bp,
    /// Edge node that tracks a single BP parent with a Kalman filter.
    Kf,
}

/// Network of nodes and bidirectional links.
///
/// Nodes are dense indices `0..node_count`. Edges are stored as ordered
/// pairs `(initiator, responder)`: the initiator transmits the first
/// message of every two-way exchange on that link. Link noise itself is
/// direction-symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub node_count: usize,
    pub edges: Vec<(usize, usize)>,
    /// Grand-master node anchoring the time reference.
    pub gm: usize,
    /// `kf_parents[v] = Some(p)` labels `v` as a KF edge node synced to `p`.
    pub kf_parents: Vec<Option<usize>>,
}

impl Topology {
    pub fn new(
        node_count: usize,
        edges: Vec<(usize, usize)>,
        gm: usize,
        kf_attachments: &[(usize, usize)],
    ) -> Result<Self> {
        let mut kf_parents = vec![None; node_count];
        for &(kf, parent) in kf_attachments {
            if kf >= node_count {
                return Err(Error::Topology(format!("KF node {kf} out of range")));
            }
            if kf_parents[kf].is_some() {
                return Err(Error::Topology(format!("KF node {kf} attached twice")));
            }
            kf_parents[kf] = Some(parent);
        }
        let t = Topology { node_count, edges, gm, kf_parents };
        t.validate()?;
        Ok(t)
    }

    pub fn label(&self, v: usize) -> NodeLabel {
        if self.kf_parents.get(v).copied().flatten().is_some() {
            NodeLabel::Kf
        } else {
            NodeLabel::Bp
        }
    }

    pub fn bp_nodes(&self) -> Vec<usize> {
        (0..self.node_count).filter(|&v| self.label(v) == NodeLabel::Bp).collect()
    }

    pub fn kf_nodes(&self) -> Vec<usize> {
        (0..self.node_count).filter(|&v| self.label(v) == NodeLabel::Kf).collect()
    }

    /// Edges whose endpoints are both BP nodes, in listed order.
    pub fn bp_edges(&self) -> Vec<(usize, usize)> {
        self.edges
            .iter()
            .copied()
            .filter(|&(a, b)| self.label(a) == NodeLabel::Bp && self.label(b) == NodeLabel::Bp)
            .collect()
    }

    /// Copy of the topology with every node relabeled BP. Used to run a
    /// whole network as one belief-propagation domain.
    pub fn relabel_all_bp(&self) -> Topology {
        Topology { kf_parents: vec![None; self.node_count], ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.node_count == 0 {
            return Err(Error::Topology("empty node set".into()));
        }
        if self.gm >= self.node_count {
            return Err(Error::Topology(format!("grand master {} out of range", self.gm)));
        }
        if self.kf_parents.len() != self.node_count {
            return Err(Error::Topology("kf_parents length mismatch".into()));
        }
        let mut seen = BTreeSet::new();
        for &(a, b) in &self.edges {
            if a >= self.node_count || b >= self.node_count {
                return Err(Error::Topology(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(Error::Topology(format!("self-loop at node {a}")));
            }
            if !seen.insert((a.min(b), a.max(b))) {
                return Err(Error::Topology(format!("duplicate edge ({a}, {b})")));
            }
        }
        if self.label(self.gm) != NodeLabel::Bp {
            return Err(Error::Topology("grand master must be a BP node".into()));
        }
        for (v, parent) in self.kf_parents.iter().enumerate() {
            let Some(p) = *parent else { continue };
            if p >= self.node_count || self.label(p) != NodeLabel::Bp {
                return Err(Error::Topology(format!("KF node {v} needs a BP parent, got {p}")));
            }
            if !seen.contains(&(v.min(p), v.max(p))) {
                return Err(Error::Topology(format!("KF node {v} has no link to parent {p}")));
            }
            for &(a, b) in &self.edges {
                if (a == v && b != p) || (b == v && a != p) {
                    return Err(Error::Topology(format!(
                        "KF node {v} may only link to its parent {p}"
                    )));
                }
            }
        }
        // BP subgraph must be connected so beliefs can reach every node.
        let bp: BTreeSet<usize> = self.bp_nodes().into_iter().collect();
        let mut adj = vec![Vec::new(); self.node_count];
        for (a, b) in self.bp_edges() {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut visited = BTreeSet::new();
        let mut queue = VecDeque::from([self.gm]);
        visited.insert(self.gm);
        while let Some(v) = queue.pop_front() {
            for &w in &adj[v] {
                if visited.insert(w) {
                    queue.push_back(w);
                }
            }
        }
        if visited.len() != bp.len() {
            return Err(Error::Topology(
                "BP subgraph is not connected to the grand master".into(),
            ));
        }
        Ok(())
    }
}

/// Per-link delay model. A one-way transit takes `prop_delay_ns` plus a
/// Gaussian stack/queueing term: `N(t_mean, t_std)` on the forward leg,
/// `N(r_mean, r_std)` on the return leg, independent per round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkModel {
    pub prop_delay_ns: f64,
    pub t_mean_ns: f64,
    pub t_std_ns: f64,
    pub r_mean_ns: f64,
    pub r_std_ns: f64,
}

impl LinkModel {
    /// Combined two-way noise variance `Var(T) + Var(R)`.
    pub fn sigma2(&self) -> f64 {
        self.t_std_ns * self.t_std_ns + self.r_std_ns * self.r_std_ns
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkParams {
    /// Uniform range for the deterministic propagation delay, ns.
    pub delay_range_ns: (f64, f64),
    pub t_std_ns: f64,
    pub r_std_ns: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockParams {
    /// Uniform range for initial clock offsets, ns.
    pub offset_range_ns: (f64, f64),
    /// When present, skews are drawn as `1 + ppm * 1e-6` with ppm uniform
    /// in this range; otherwise every clock runs at exactly rate 1.
    pub skew_ppm_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExchangeParams {
    /// Rounds per synchronization set (K).
    pub k: usize,
    /// Rounds used to estimate link noise variance when a link is first
    /// brought up.
    pub training_rounds: usize,
    /// Reference-time spacing between consecutive rounds, ns.
    pub delta_t_ns: f64,
    /// Responder turnaround between receiving and replying, reference ns.
    pub turnaround_ns: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpParams {
    pub max_iters: usize,
    /// Convergence threshold on the largest belief-mean change, ns.
    pub epsilon_ns: f64,
    /// Message damping weight on new factor-to-variable messages; 1.0
    /// disables damping.
    pub damping: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McParams {
    pub runs: usize,
    pub seed: u64,
}

/// Full experiment description; all estimator inputs derive from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub topology: Topology,
    pub link: LinkParams,
    pub clock: ClockParams,
    pub exchange: ExchangeParams,
    pub bp: BpParams,
    pub mc: McParams,
    /// Reference time at which the simulation starts, ns. Kept large by
    /// default so estimators face realistically large raw time stamps.
    pub epoch_ns: f64,
}

/// Mesh of 7 backhaul nodes (ring 0-1-2-3-4-5-6 plus chords 1-5 and 2-4)
/// with the grand master at node 0, and four edge nodes: 7, 8 under node 3
/// and 9, 10 under node 5.
pub fn default_topology() -> Topology {
    Topology::new(
        11,
        vec![
            (0, 1),
            (1, 2),
            (2, 3),
            (3, 4),
            (4, 5),
            (5, 6),
            (6, 0),
            (1, 5),
            (2, 4),
            // edge-node links last so backhaul noise draws stay aligned
            // between whole-network and hybrid runs of the same trial
            (3, 7),
            (3, 8),
            (5, 9),
            (5, 10),
        ],
        0,
        &[(7, 3), (8, 3), (9, 5), (10, 5)],
    )
    .expect("default topology is valid")
}

impl Default for Scenario {
    fn default() -> Self {
        Scenario {
            topology: default_topology(),
            link: LinkParams { delay_range_ns: (200.0, 300.0), t_std_ns: 4.0, r_std_ns: 4.0 },
            clock: ClockParams { offset_range_ns: (-50.0, 50.0), skew_ppm_range: None },
            exchange: ExchangeParams {
                k: 10,
                training_rounds: 1000,
                delta_t_ns: 1e6,
                turnaround_ns: 1000.0,
            },
            bp: BpParams { max_iters: 20, epsilon_ns: 0.1, damping: 1.0 },
            mc: McParams { runs: 1000, seed: 0xC10C_5EED },
            epoch_ns: 1e9,
        }
    }
}

fn check_range(what: &'static str, (lo, hi): (f64, f64)) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || lo > hi {
        return Err(Error::MalformedRange { what, lo, hi });
    }
    Ok(())
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.topology.validate()?;
        check_range("link delay", self.link.delay_range_ns)?;
        check_range("clock offset", self.clock.offset_range_ns)?;
        if let Some(r) = self.clock.skew_ppm_range {
            check_range("clock skew ppm", r)?;
        }
        if self.link.delay_range_ns.0 < 0.0 {
            return Err(Error::Parameter("propagation delay must be >= 0".into()));
        }
        if self.link.t_std_ns < 0.0 || self.link.r_std_ns < 0.0 {
            return Err(Error::Parameter("link noise std must be >= 0".into()));
        }
        if self.exchange.k < 2 {
            return Err(Error::Parameter("exchange.k must be >= 2".into()));
        }
        if self.exchange.training_rounds < 30 {
            return Err(Error::Parameter("training_rounds must be >= 30".into()));
        }
        if !(self.exchange.delta_t_ns > 0.0) {
            return Err(Error::Parameter("delta_t_ns must be > 0".into()));
        }
        if self.exchange.turnaround_ns < 0.0 {
            return Err(Error::Parameter("turnaround_ns must be >= 0".into()));
        }
        if self.bp.max_iters == 0 {
            return Err(Error::Parameter("bp.max_iters must be >= 1".into()));
        }
        if !(self.bp.epsilon_ns > 0.0) {
            return Err(Error::Parameter("bp.epsilon_ns must be > 0".into()));
        }
        if !(self.bp.damping > 0.0 && self.bp.damping <= 1.0) {
            return Err(Error::Parameter("bp.damping must be in (0, 1]".into()));
        }
        if self.mc.runs == 0 {
            return Err(Error::Parameter("mc.runs must be >= 1".into()));
        }
        if !self.epoch_ns.is_finite() || self.epoch_ns < 0.0 {
            return Err(Error::Parameter("epoch_ns must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Whether clock skews are actually simulated. Controls whether the
    /// pipeline applies the trained relative-skew estimate or the exact
    /// value 1.
    pub fn skew_enabled(&self) -> bool {
        matches!(self.clock.skew_ppm_range, Some((lo, hi)) if lo != 0.0 || hi != 0.0)
    }

    /// Scenario with every node in the belief-propagation domain.
    pub fn with_all_bp(&self) -> Scenario {
        Scenario { topology: self.topology.relabel_all_bp(), ..self.clone() }
    }

    /// Draw the concrete world for one Monte-Carlo trial. Pure function of
    /// `(self.mc.seed, trial)`.
    ///
    /// Draw order: per-node offsets (grand master then forced to 0), then
    /// per-node skew ppm when enabled (grand master forced to rate 1), then
    /// per-edge propagation delays in edge-list order.
    pub fn sample_instance(&self, trial: u64) -> Result<WorldInstance> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.mc.seed);
        rng.set_stream(trial * 2);

        let offsets = sample_uniform_vec(&mut rng, self.clock.offset_range_ns, self.topology.node_count);
        let skews = match self.clock.skew_ppm_range {
            Some(range) => sample_uniform_vec(&mut rng, range, self.topology.node_count)
                .into_iter()
                .map(|ppm| 1.0 + ppm * 1e-6)
                .collect(),
            None => vec![1.0; self.topology.node_count],
        };
        let mut clocks: Vec<ClockState> = offsets
            .into_iter()
            .zip(skews)
            .map(|(offset_ns, skew)| ClockState { skew, offset_ns })
            .collect();
        // The grand master defines reference time.
        clocks[self.topology.gm] = ClockState { skew: 1.0, offset_ns: 0.0 };

        let delays = sample_uniform_vec(&mut rng, self.link.delay_range_ns, self.topology.edges.len());
        let links = self
            .topology
            .edges
            .iter()
            .zip(delays)
            .map(|(&(a, b), d)| {
                let link = LinkModel {
                    prop_delay_ns: d,
                    t_mean_ns: 0.0,
                    t_std_ns: self.link.t_std_ns,
                    r_mean_ns: 0.0,
                    r_std_ns: self.link.r_std_ns,
                };
                ((a.min(b), a.max(b)), link)
            })
            .collect();

        WorldInstance::from_parts(self.topology.clone(), clocks, links, trial)
    }

    /// RNG for exchange noise of one trial; independent of the world
    /// sampling stream.
    pub fn exchange_rng(&self, trial: u64) -> TrialRng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.mc.seed);
        rng.set_stream(trial * 2 + 1);
        rng
    }
}

fn sample_uniform_vec(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    if lo == hi {
        return vec![lo; n];
    }
    let dist = Uniform::new_inclusive(lo, hi);
    (0..n).map(|_| dist.sample(rng)).collect()
}

/// Concrete sampled world for one trial: every clock's true state and
/// every link's realized delay model.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldInstance {
    pub topology: Topology,
    clocks: Vec<ClockState>,
    links: BTreeMap<(usize, usize), LinkModel>,
    pub trial_index: u64,
}

impl WorldInstance {
    pub fn from_parts(
        topology: Topology,
        clocks: Vec<ClockState>,
        links: BTreeMap<(usize, usize), LinkModel>,
        trial_index: u64,
    ) -> Result<Self> {
        if clocks.len() != topology.node_count {
            return Err(Error::Parameter(format!(
                "expected {} clocks, got {}",
                topology.node_count,
                clocks.len()
            )));
        }
        for &(a, b) in &topology.edges {
            if !links.contains_key(&(a.min(b), a.max(b))) {
                return Err(Error::Parameter(format!("missing link model for edge ({a}, {b})")));
            }
        }
        Ok(WorldInstance { topology, clocks, links, trial_index })
    }

    pub fn clock(&self, node: usize) -> &ClockState {
        &self.clocks[node]
    }

    pub fn link(&self, a: usize, b: usize) -> &LinkModel {
        &self.links[&(a.min(b), a.max(b))]
    }

    /// True offset of `node`'s clock relative to the grand master clock.
    /// Sampled worlds pin the grand master at offset 0, so this usually
    /// equals the raw offset.
    pub fn offset_vs_gm(&self, node: usize) -> f64 {
        self.clocks[node].offset_ns - self.clocks[self.topology.gm].offset_ns
    }
}
