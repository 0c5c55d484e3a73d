//! Gaussian belief propagation for network-wide offset estimation.
//!
//! The factor graph has one variable per BP node (its clock offset) and
//! one factor per BP link holding that link's pair statistics. A factor
//! on link (initiator, responder) encodes the Gaussian constraint
//!
//! ```text
//! theta_init - alpha * theta_resp  ~  N(delta_hat, factor_var)
//! ```
//!
//! Messages and beliefs are Gaussians parameterized by (mean, precision)
//! so that the two extreme priors are exactly representable: the grand
//! master is anchored with infinite precision, everything else starts
//! non-informative with precision zero. Anchors absorb in products (two
//! anchors must agree exactly); non-informative messages are inert and
//! propagate as non-informative through factors.
//!
//! The schedule is synchronous: each iteration computes every
//! variable-to-factor message from the previous iteration's mailboxes,
//! then every factor-to-variable message, then all beliefs. On trees this
//! reaches the exact marginals after diameter-many iterations; on loopy
//! graphs it is the usual loopy-BP approximation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::model::Topology;
use crate::ptp::PairStats;

/// Gaussian in (mean, precision) form. `precision == 0` encodes the
/// non-informative (improper uniform) message with `mean` fixed at 0 by
/// convention; `precision == +inf` encodes an anchored point value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianMsg {
    pub mean: f64,
    pub precision: f64,
}

impl GaussianMsg {
    pub const NON_INFORMATIVE: GaussianMsg = GaussianMsg { mean: 0.0, precision: 0.0 };

    pub fn anchored(mean: f64) -> GaussianMsg {
        GaussianMsg { mean, precision: f64::INFINITY }
    }

    pub fn from_mean_var(mean: f64, var: f64) -> GaussianMsg {
        if var == 0.0 {
            GaussianMsg::anchored(mean)
        } else {
            GaussianMsg { mean, precision: 1.0 / var }
        }
    }

    pub fn is_informative(&self) -> bool {
        self.precision > 0.0
    }

    pub fn is_anchored(&self) -> bool {
        self.precision.is_infinite()
    }

    /// Variance; 0 for anchored, +inf for non-informative.
    pub fn variance(&self) -> f64 {
        if self.is_anchored() {
            0.0
        } else if self.precision == 0.0 {
            f64::INFINITY
        } else {
            1.0 / self.precision
        }
    }

    /// Product of Gaussian densities: precisions add, means combine
    /// precision-weighted. Anchors absorb; two anchors must carry the
    /// same mean.
    pub fn product<'a>(terms: impl IntoIterator<Item = &'a GaussianMsg>) -> Result<GaussianMsg> {
        let mut anchor: Option<f64> = None;
        let mut precision = 0.0;
        let mut weighted_mean = 0.0;
        for t in terms {
            if t.is_anchored() {
                match anchor {
                    Some(a) if a != t.mean => {
                        return Err(Error::ConflictingAnchors { a, b: t.mean })
                    }
                    _ => anchor = Some(t.mean),
                }
            } else {
                precision += t.precision;
                weighted_mean += t.precision * t.mean;
            }
        }
        if let Some(mean) = anchor {
            return Ok(GaussianMsg::anchored(mean));
        }
        if precision == 0.0 {
            return Ok(GaussianMsg::NON_INFORMATIVE);
        }
        Ok(GaussianMsg { mean: weighted_mean / precision, precision })
    }
}

/// One pairwise constraint between two variables.
#[derive(Debug, Clone, Copy)]
pub struct Factor {
    pub initiator: usize,
    pub responder: usize,
    pub alpha_hat: f64,
    /// Estimate of `theta_init - alpha_hat * theta_resp`, ns.
    pub delta_hat: f64,
    pub factor_var: f64,
}

impl Factor {
    /// Message toward the initiator variable given the responder-side
    /// input: the constraint maps `theta_resp ~ (m, v)` to
    /// `alpha * theta_resp + delta ~ (alpha m + delta, alpha^2 v + fv)`.
    pub fn msg_to_initiator(&self, incoming: &GaussianMsg) -> GaussianMsg {
        if !incoming.is_informative() {
            return GaussianMsg::NON_INFORMATIVE;
        }
        let mean = self.alpha_hat * incoming.mean + self.delta_hat;
        let var = self.alpha_hat * self.alpha_hat * incoming.variance() + self.factor_var;
        GaussianMsg::from_mean_var(mean, var)
    }

    /// Message toward the responder variable: the inverse map
    /// `theta_resp = (theta_init - delta) / alpha`.
    pub fn msg_to_responder(&self, incoming: &GaussianMsg) -> GaussianMsg {
        if !incoming.is_informative() {
            return GaussianMsg::NON_INFORMATIVE;
        }
        let mean = (incoming.mean - self.delta_hat) / self.alpha_hat;
        let var = (incoming.variance() + self.factor_var) / (self.alpha_hat * self.alpha_hat);
        GaussianMsg::from_mean_var(mean, var)
    }
}

/// Factor side index within mailboxes: messages stored per (factor,
/// endpoint) pair.
const TO_INITIATOR: usize = 0;
const TO_RESPONDER: usize = 1;

/// Belief-propagation state over the BP subgraph of a topology.
#[derive(Debug, Clone)]
pub struct FactorGraph {
    /// Dense variable index -> node id.
    nodes: Vec<usize>,
    /// node id -> dense variable index.
    var_of_node: BTreeMap<usize, usize>,
    priors: Vec<GaussianMsg>,
    factors: Vec<Factor>,
    /// Per variable, (factor index, endpoint side of this variable).
    var_factors: Vec<Vec<(usize, usize)>>,
    /// Factor-to-variable mailboxes from the last completed iteration.
    f2v: Vec<[GaussianMsg; 2]>,
    beliefs: Vec<GaussianMsg>,
    iteration: usize,
    damping: f64,
    gm_var: usize,
}

/// Result of running BP to convergence or iteration limit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpOutcome {
    pub iterations: usize,
    pub converged: bool,
    pub last_change_ns: f64,
}

/// Assemble the graph for the BP nodes of `topology`, taking each BP
/// edge's statistics from `stats` keyed by the unordered node pair. The
/// stored orientation follows the edge list: the first endpoint of an
/// edge is the initiator.
pub fn build_factor_graph(
    topology: &Topology,
    stats: &BTreeMap<(usize, usize), PairStats>,
    damping: f64,
) -> Result<FactorGraph> {
    topology.validate()?;
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::Parameter("damping must be in (0, 1]".into()));
    }
    let nodes = topology.bp_nodes();
    let var_of_node: BTreeMap<usize, usize> =
        nodes.iter().enumerate().map(|(v, &n)| (n, v)).collect();
    let mut factors = Vec::new();
    let mut var_factors = vec![Vec::new(); nodes.len()];
    for (a, b) in topology.bp_edges() {
        let s = stats
            .get(&(a.min(b), a.max(b)))
            .ok_or(Error::MissingPairStats(a, b))?;
        if !(s.factor_var > 0.0) {
            return Err(Error::NonPositiveFactorVar(s.factor_var));
        }
        let initiator = var_of_node[&a];
        let responder = var_of_node[&b];
        let idx = factors.len();
        factors.push(Factor {
            initiator,
            responder,
            alpha_hat: s.alpha_hat,
            delta_hat: s.delta_hat,
            factor_var: s.factor_var,
        });
        var_factors[initiator].push((idx, TO_INITIATOR));
        var_factors[responder].push((idx, TO_RESPONDER));
    }
    let gm_var = var_of_node[&topology.gm];
    let mut priors = vec![GaussianMsg::NON_INFORMATIVE; nodes.len()];
    priors[gm_var] = GaussianMsg::anchored(0.0);
    let beliefs = priors.clone();
    let f2v = vec![[GaussianMsg::NON_INFORMATIVE; 2]; factors.len()];
    Ok(FactorGraph {
        nodes,
        var_of_node,
        priors,
        factors,
        var_factors,
        f2v,
        beliefs,
        iteration: 0,
        damping,
        gm_var,
    })
}

impl FactorGraph {
    pub fn variable_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn factor_count(&self) -> usize {
        self.factors.len()
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Node id of the anchored grand master.
    pub fn gm_node(&self) -> usize {
        self.nodes[self.gm_var]
    }

    /// Factors with endpoints as dense variable indices.
    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    /// Priors in dense variable order.
    pub fn priors(&self) -> &[GaussianMsg] {
        &self.priors
    }

    /// Node ids of the variables, in dense variable order.
    pub fn node_ids(&self) -> &[usize] {
        &self.nodes
    }

    pub fn belief(&self, node: usize) -> Option<&GaussianMsg> {
        self.var_of_node.get(&node).map(|&v| &self.beliefs[v])
    }

    /// Offset estimate: belief mean, or None while still non-informative.
    pub fn belief_mean(&self, node: usize) -> Option<f64> {
        self.belief(node).filter(|b| b.is_informative()).map(|b| b.mean)
    }

    /// Variable-to-factor message: product of the prior and every
    /// incoming factor message except the target factor's own.
    fn msg_var_to_factor(&self, var: usize, skip_factor: usize) -> Result<GaussianMsg> {
        let terms = std::iter::once(&self.priors[var]).chain(
            self.var_factors[var]
                .iter()
                .filter(|(f, _)| *f != skip_factor)
                .map(|&(f, side)| &self.f2v[f][side]),
        );
        GaussianMsg::product(terms)
    }

    /// One synchronous iteration; returns the largest absolute change of
    /// belief means, counting a still-non-informative belief as infinite
    /// unless every variable is still non-informative.
    pub fn bp_iterate(&mut self) -> Result<f64> {
        // variable -> factor, all from the previous mailbox snapshot
        let mut v2f = vec![[GaussianMsg::NON_INFORMATIVE; 2]; self.factors.len()];
        for (idx, f) in self.factors.iter().enumerate() {
            v2f[idx][TO_INITIATOR] = self.msg_var_to_factor(f.initiator, idx)?;
            v2f[idx][TO_RESPONDER] = self.msg_var_to_factor(f.responder, idx)?;
        }
        // factor -> variable, with optional damping in natural parameters
        let mut new_f2v = vec![[GaussianMsg::NON_INFORMATIVE; 2]; self.factors.len()];
        for (idx, f) in self.factors.iter().enumerate() {
            let to_init = f.msg_to_initiator(&v2f[idx][TO_RESPONDER]);
            let to_resp = f.msg_to_responder(&v2f[idx][TO_INITIATOR]);
            new_f2v[idx][TO_INITIATOR] = self.damp(&self.f2v[idx][TO_INITIATOR], &to_init);
            new_f2v[idx][TO_RESPONDER] = self.damp(&self.f2v[idx][TO_RESPONDER], &to_resp);
        }
        self.f2v = new_f2v;

        let mut max_change = 0.0f64;
        let mut any_informative = false;
        for var in 0..self.nodes.len() {
            let terms = std::iter::once(&self.priors[var])
                .chain(self.var_factors[var].iter().map(|&(f, side)| &self.f2v[f][side]));
            let belief = GaussianMsg::product(terms)?;
            let change = if belief.is_informative() {
                any_informative = true;
                (belief.mean - self.beliefs[var].mean).abs()
            } else {
                f64::INFINITY
            };
            max_change = max_change.max(change);
            self.beliefs[var] = belief;
        }
        if !any_informative {
            max_change = 0.0;
        }
        self.iteration += 1;
        Ok(max_change)
    }

    /// Blend old and new message in natural parameters; `damping == 1`
    /// keeps the new message untouched. Anchored or non-informative
    /// endpoints switch immediately (blending either is ill-defined).
    fn damp(&self, old: &GaussianMsg, new: &GaussianMsg) -> GaussianMsg {
        if self.damping == 1.0
            || !old.is_informative()
            || !new.is_informative()
            || old.is_anchored()
            || new.is_anchored()
        {
            return *new;
        }
        let precision = self.damping * new.precision + (1.0 - self.damping) * old.precision;
        let eta = self.damping * new.precision * new.mean
            + (1.0 - self.damping) * old.precision * old.mean;
        GaussianMsg { mean: eta / precision, precision }
    }

    /// Drop the last factor to reach states the validated builder cannot
    /// produce, e.g. a variable stranded away from the anchor.
    #[cfg(test)]
    pub(crate) fn remove_last_factor_for_tests(&mut self) {
        let idx = self.factors.len() - 1;
        self.factors.pop();
        self.f2v.pop();
        for vf in &mut self.var_factors {
            vf.retain(|&(f, _)| f != idx);
        }
    }

    /// Iterate until the belief means move at most `epsilon_ns`, or
    /// `max_iters` is reached.
    pub fn run_bp(&mut self, max_iters: usize, epsilon_ns: f64) -> Result<BpOutcome> {
        let mut last_change = f64::INFINITY;
        for l in 1..=max_iters {
            last_change = self.bp_iterate()?;
            if last_change <= epsilon_ns {
                return Ok(BpOutcome { iterations: l, converged: true, last_change_ns: last_change });
            }
        }
        Ok(BpOutcome { iterations: max_iters, converged: false, last_change_ns: last_change })
    }
}
