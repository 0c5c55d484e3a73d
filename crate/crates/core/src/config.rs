//! Scenario files: a strict JSON schema mapped onto [`Scenario`].
//!
//! Node ids are 1-based in files (and in all CSV output) and 0-based in
//! memory. Unknown keys are rejected so typos fail loudly instead of
//! silently falling back to defaults. Fields with library-level defaults
//! that rarely need tuning (responder turnaround, message damping) are
//! deliberately not part of the file format.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    BpParams, ClockParams, ExchangeParams, LinkParams, McParams, Scenario, Topology,
};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub topology: TopologySection,
    pub link: LinkSection,
    pub clock: ClockSection,
    pub exchange: ExchangeSection,
    pub bp: BpSection,
    pub mc: McSection,
    pub epoch_ns: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySection {
    /// Number of nodes; ids in this file run 1..=nodes.
    pub nodes: usize,
    /// Links as `[initiator, responder]` pairs.
    pub edges: Vec<(usize, usize)>,
    /// Grand-master node id.
    pub gm: usize,
    /// `[kf_node, bp_parent]` pairs naming Kalman-tracked edge nodes.
    pub kf_attachments: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSection {
    pub delay_range_ns: (f64, f64),
    pub t_std_ns: f64,
    pub r_std_ns: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClockSection {
    pub offset_range_ns: (f64, f64),
    /// `null` disables skew simulation entirely.
    pub skew_ppm_range: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExchangeSection {
    pub k: usize,
    pub training_rounds: usize,
    pub delta_t_ns: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BpSection {
    pub max_iters: usize,
    pub epsilon_ns: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McSection {
    pub runs: usize,
    pub seed: u64,
}

fn to_internal_id(id: usize, nodes: usize, what: &str) -> Result<usize> {
    if id == 0 || id > nodes {
        return Err(Error::Config(format!("{what} id {id} out of range 1..={nodes}")));
    }
    Ok(id - 1)
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    /// Validate and convert into the in-memory scenario.
    pub fn into_scenario(self) -> Result<Scenario> {
        let nodes = self.topology.nodes;
        let edges = self
            .topology
            .edges
            .iter()
            .map(|&(a, b)| {
                Ok((to_internal_id(a, nodes, "edge node")?, to_internal_id(b, nodes, "edge node")?))
            })
            .collect::<Result<Vec<_>>>()?;
        let kf = self
            .topology
            .kf_attachments
            .iter()
            .map(|&(v, p)| {
                Ok((to_internal_id(v, nodes, "KF node")?, to_internal_id(p, nodes, "KF parent")?))
            })
            .collect::<Result<Vec<_>>>()?;
        let gm = to_internal_id(self.topology.gm, nodes, "grand master")?;
        let topology = Topology::new(nodes, edges, gm, &kf)?;

        let defaults = Scenario::default();
        let scenario = Scenario {
            topology,
            link: LinkParams {
                delay_range_ns: self.link.delay_range_ns,
                t_std_ns: self.link.t_std_ns,
                r_std_ns: self.link.r_std_ns,
            },
            clock: ClockParams {
                offset_range_ns: self.clock.offset_range_ns,
                skew_ppm_range: self.clock.skew_ppm_range,
            },
            exchange: ExchangeParams {
                k: self.exchange.k,
                training_rounds: self.exchange.training_rounds,
                delta_t_ns: self.exchange.delta_t_ns,
                turnaround_ns: defaults.exchange.turnaround_ns,
            },
            bp: BpParams {
                max_iters: self.bp.max_iters,
                epsilon_ns: self.bp.epsilon_ns,
                damping: defaults.bp.damping,
            },
            mc: McParams { runs: self.mc.runs, seed: self.mc.seed },
            epoch_ns: self.epoch_ns,
        };
        scenario.validate()?;
        Ok(scenario)
    }

    /// File-format view of a scenario, with ids shifted back to 1-based.
    pub fn from_scenario(s: &Scenario) -> Self {
        let kf_attachments = s
            .topology
            .kf_parents
            .iter()
            .enumerate()
            .filter_map(|(v, p)| p.map(|p| (v + 1, p + 1)))
            .collect();
        ScenarioFile {
            topology: TopologySection {
                nodes: s.topology.node_count,
                edges: s.topology.edges.iter().map(|&(a, b)| (a + 1, b + 1)).collect(),
                gm: s.topology.gm + 1,
                kf_attachments,
            },
            link: LinkSection {
                delay_range_ns: s.link.delay_range_ns,
                t_std_ns: s.link.t_std_ns,
                r_std_ns: s.link.r_std_ns,
            },
            clock: ClockSection {
                offset_range_ns: s.clock.offset_range_ns,
                skew_ppm_range: s.clock.skew_ppm_range,
            },
            exchange: ExchangeSection {
                k: s.exchange.k,
                training_rounds: s.exchange.training_rounds,
                delta_t_ns: s.exchange.delta_t_ns,
            },
            bp: BpSection { max_iters: s.bp.max_iters, epsilon_ns: s.bp.epsilon_ns },
            mc: McSection { runs: s.mc.runs, seed: s.mc.seed },
            epoch_ns: s.epoch_ns,
        }
    }

    pub fn to_json_pretty(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Load a scenario from a JSON file, or the built-in default when `path`
/// is `None`.
pub fn load_scenario(path: Option<&Path>) -> Result<Scenario> {
    match path {
        Some(p) => ScenarioFile::from_path(p)?.into_scenario(),
        None => Ok(Scenario::default()),
    }
}
