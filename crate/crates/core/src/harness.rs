//! Monte-Carlo runner: repeated independent trials of the hybrid engine,
//! per-node per-iteration RMSE aggregation and CSV output.
//!
//! Trials are embarrassingly parallel. Each one is a pure function of
//! `(seed, trial_index)`, workers return their squared-error matrices and
//! the fold over trials happens in trial-index order, so results are
//! byte-identical no matter how many threads run. The worker count comes
//! from `SYNCNET_THREADS` (unset or 0 picks the default pool).

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::gbp::FactorGraph;
use crate::hybrid::run_hybrid;
use crate::model::{NodeLabel, Scenario};
use crate::ptp::TimestampQuad;

/// Which estimator layout a run uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Every node is a BP variable, including the edge nodes.
    BpWhole,
    /// Backhaul nodes run BP; edge nodes track their parent with a KF.
    Hybrid,
}

impl Mode {
    /// Identifier used in the CSV `scenario` column.
    pub fn scenario_label(self) -> &'static str {
        match self {
            Mode::BpWhole => "bp_whole",
            Mode::Hybrid => "hybrid",
        }
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Mode> {
        match s {
            "bp" | "bp_whole" => Ok(Mode::BpWhole),
            "hybrid" => Ok(Mode::Hybrid),
            other => Err(Error::Config(format!("unknown mode '{other}', expected bp or hybrid"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.scenario_label())
    }
}

/// One aggregated result: RMSE of a node's offset estimate at one BP
/// iteration, over all trials of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseRow {
    pub scenario_id: String,
    /// External (1-based) node id.
    pub node_id: usize,
    /// 1-based BP iteration.
    pub iteration: usize,
    /// "bp" for belief-propagation estimates, "hybrid" for composed
    /// edge-node estimates.
    pub estimator: &'static str,
    pub rmse_ns: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RmseTable {
    pub rows: Vec<RmseRow>,
}

impl RmseTable {
    pub fn extend(&mut self, other: RmseTable) {
        self.rows.extend(other.rows);
    }

    /// Rows of one node in iteration order.
    pub fn node_rows(&self, scenario_id: &str, node_id: usize) -> Vec<&RmseRow> {
        self.rows
            .iter()
            .filter(|r| r.scenario_id == scenario_id && r.node_id == node_id)
            .collect()
    }
}

/// Run `runs` independent trials and aggregate offset RMSE per node and
/// iteration. Estimates still uninformative at an iteration count as 0,
/// so early-iteration RMSE reflects the raw prior uncertainty. Worker
/// count from `SYNCNET_THREADS`.
pub fn run_monte_carlo(scenario: &Scenario, mode: Mode, runs: usize, seed: u64) -> Result<RmseTable> {
    let threads = match std::env::var("SYNCNET_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .map_err(|_| Error::Config(format!("SYNCNET_THREADS must be an integer, got '{v}'")))?,
        Err(_) => 0,
    };
    run_monte_carlo_on(scenario, mode, runs, seed, threads)
}

/// [`run_monte_carlo`] with an explicit worker count (0 = default pool).
pub fn run_monte_carlo_on(
    scenario: &Scenario,
    mode: Mode,
    runs: usize,
    seed: u64,
    threads: usize,
) -> Result<RmseTable> {
    if runs == 0 {
        return Err(Error::Config("runs must be >= 1".into()));
    }
    let mut s = match mode {
        Mode::BpWhole => scenario.with_all_bp(),
        Mode::Hybrid => scenario.clone(),
    };
    s.mc.seed = seed;
    s.mc.runs = runs;
    s.validate()?;

    let trial_errors = |trial: u64| -> Result<Vec<Vec<f64>>> {
        let world = s.sample_instance(trial)?;
        let mut rng = s.exchange_rng(trial);
        let trace = run_hybrid(&world, &s, &mut rng)?;
        Ok(trace
            .estimates
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(v, est)| {
                        let err = est.unwrap_or(0.0) - world.offset_vs_gm(v);
                        err * err
                    })
                    .collect()
            })
            .collect())
    };

    let run_all = || -> Result<Vec<Vec<Vec<f64>>>> {
        (0..runs as u64).into_par_iter().map(trial_errors).collect()
    };
    let per_trial = if threads == 0 {
        run_all()?
    } else {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(run_all)?
    };

    // fold in trial order so float addition is schedule-independent
    let iters = s.bp.max_iters;
    let nodes = s.topology.node_count;
    let mut sums = vec![vec![0.0f64; nodes]; iters];
    for errors in &per_trial {
        for (l, row) in errors.iter().enumerate() {
            for (v, e) in row.iter().enumerate() {
                sums[l][v] += e;
            }
        }
    }

    let mut rows = Vec::with_capacity(nodes * iters);
    for v in 0..nodes {
        let estimator = match (mode, s.topology.label(v)) {
            (Mode::Hybrid, NodeLabel::Kf) => "hybrid",
            _ => "bp",
        };
        for l in 0..iters {
            rows.push(RmseRow {
                scenario_id: mode.scenario_label().to_string(),
                node_id: v + 1,
                iteration: l + 1,
                estimator,
                rmse_ns: (sums[l][v] / runs as f64).sqrt(),
                trials: runs,
            });
        }
    }
    Ok(RmseTable { rows })
}

/// Write a table as CSV, sorted by (scenario, node, iteration). The
/// formatting is fixed-precision and locale-independent so identical
/// tables serialize to identical bytes.
pub fn write_results<P: AsRef<Path>>(table: &RmseTable, path: P) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    write_results_to(table, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_results_to<W: Write>(table: &RmseTable, w: &mut W) -> Result<()> {
    let mut order: Vec<&RmseRow> = table.rows.iter().collect();
    order.sort_by(|a, b| {
        (&a.scenario_id, a.node_id, a.iteration).cmp(&(&b.scenario_id, b.node_id, b.iteration))
    });
    writeln!(w, "scenario,node,iteration,estimator,rmse_ns,trials")?;
    for r in order {
        writeln!(
            w,
            "{},{},{},{},{:.9},{}",
            r.scenario_id, r.node_id, r.iteration, r.estimator, r.rmse_ns, r.trials
        )?;
    }
    Ok(())
}

/// Debug dump of an exchange set, one line per round.
pub fn quads_to_csv(edge: (usize, usize), quads: &[TimestampQuad]) -> String {
    let mut out = String::from("edge,k,c1,c2,c3,c4\n");
    for (k, q) in quads.iter().enumerate() {
        out.push_str(&format!(
            "{}-{},{},{:.9},{:.9},{:.9},{:.9}\n",
            edge.0 + 1,
            edge.1 + 1,
            k,
            q.c1,
            q.c2,
            q.c3,
            q.c4
        ));
    }
    out
}

/// Debug dump of the current beliefs of a factor graph; uninformative
/// nodes have no mean yet and are skipped.
pub fn beliefs_to_csv(trial: u64, graph: &FactorGraph) -> String {
    let mut out = String::from("trial,iteration,node,belief_mean_ns,belief_var_ns2\n");
    for &node in graph.node_ids() {
        let belief = graph.belief(node).expect("graph node");
        if !belief.is_informative() {
            continue;
        }
        out.push_str(&format!(
            "{},{},{},{:.9},{:.9}\n",
            trial,
            graph.iteration(),
            node + 1,
            belief.mean,
            belief.variance()
        ));
    }
    out
}
