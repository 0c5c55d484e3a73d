//! Command-line front end: Monte-Carlo runs, exact-marginal inspection,
//! per-link training and scenario validation.
//!
//! Exit codes: 0 success, 1 configuration problem (bad flags, unreadable
//! or invalid scenario), 2 runtime failure.

use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use syncnet_core::config::load_scenario;
use syncnet_core::error::Error;
use syncnet_core::harness::{run_monte_carlo, write_results, write_results_to, Mode};
use syncnet_core::hybrid::{partition_domains, prepare_trial, TrialSetup};
use syncnet_core::model::Scenario;
use syncnet_core::oracle::{exact_network_marginals, ExactMarginals};

#[derive(Parser)]
#[command(
    name = "syncnet",
    version,
    about = "Clock synchronization simulator: two-way stamp exchange, \
             belief propagation and Kalman tracking over packet networks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Monte-Carlo experiment and emit the RMSE table as CSV.
    Run {
        /// Scenario JSON; omit for the built-in default.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// "bp" puts every node on belief propagation, "hybrid" tracks
        /// edge nodes with Kalman filters instead.
        #[arg(long, default_value = "bp")]
        mode: String,
        /// Trial count; defaults to the scenario's setting.
        #[arg(long)]
        runs: Option<usize>,
        /// Master seed; defaults to the scenario's setting.
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the exact posterior marginals of one trial's factor graph.
    Oracle {
        /// Scenario JSON; omit for the built-in default.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Trial index selecting the sampled world and stamp noise.
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
    /// Train every link of one trial and print the noise estimates.
    Train {
        /// Scenario JSON; omit for the built-in default.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Trial index selecting the sampled world and stamp noise.
        #[arg(long, default_value_t = 0)]
        trial: u64,
    },
    /// Check a scenario file against the model invariants.
    Validate {
        /// Scenario JSON; omit for the built-in default.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
}

type CmdResult = Result<(), (u8, Error)>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version requests leave through here with success
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        // the reader hung up (e.g. piped into head); nothing left to say
        Err((_, e)) if broken_pipe(&e) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}

fn broken_pipe(e: &Error) -> bool {
    matches!(e, Error::Io(io) if io.kind() == io::ErrorKind::BrokenPipe)
}

/// Errors in what the user asked for exit 1, failures while doing it
/// exit 2.
fn late(e: Error) -> (u8, Error) {
    let code = match e {
        Error::MalformedRange { .. }
        | Error::Topology(_)
        | Error::Parameter(_)
        | Error::Config(_)
        | Error::Json(_) => 1,
        _ => 2,
    };
    (code, e)
}

fn load(path: Option<&Path>) -> Result<Scenario, (u8, Error)> {
    let scenario = load_scenario(path).map_err(|e| (1, e))?;
    scenario.validate().map_err(|e| (1, e))?;
    Ok(scenario)
}

fn dispatch(cli: Cli) -> CmdResult {
    match cli.command {
        Command::Run { scenario, mode, runs, seed, out } => {
            let scenario = load(scenario.as_deref())?;
            let mode: Mode = mode.parse().map_err(|e| (1, e))?;
            let runs = runs.unwrap_or(scenario.mc.runs);
            let seed = seed.unwrap_or(scenario.mc.seed);
            let table = run_monte_carlo(&scenario, mode, runs, seed).map_err(late)?;
            match out {
                Some(path) => write_results(&table, path).map_err(late)?,
                None => {
                    let stdout = std::io::stdout();
                    let mut lock = stdout.lock();
                    write_results_to(&table, &mut lock).map_err(late)?;
                    lock.flush().map_err(|e| late(e.into()))?;
                }
            }
            Ok(())
        }
        Command::Oracle { scenario, trial } => {
            let scenario = load(scenario.as_deref())?;
            let world = scenario.sample_instance(trial).map_err(late)?;
            let mut rng = scenario.exchange_rng(trial);
            let setup = prepare_trial(&world, &scenario, &mut rng).map_err(late)?;
            let exact = exact_network_marginals(&setup.graph).map_err(late)?;
            print_marginals(&mut io::stdout().lock(), trial, &exact).map_err(|e| late(e.into()))
        }
        Command::Train { scenario, trial } => {
            let scenario = load(scenario.as_deref())?;
            let world = scenario.sample_instance(trial).map_err(late)?;
            let mut rng = scenario.exchange_rng(trial);
            let setup = prepare_trial(&world, &scenario, &mut rng).map_err(late)?;
            print_training(&mut io::stdout().lock(), trial, &scenario, &setup)
                .map_err(|e| late(e.into()))
        }
        Command::Validate { scenario } => {
            let scenario = load(scenario.as_deref())?;
            let (bp, kf) = partition_domains(&scenario.topology).map_err(|e| (1, e))?;
            writeln!(
                io::stdout().lock(),
                "scenario ok: {} nodes ({} bp, {} kf), {} links, grand master node {}",
                scenario.topology.node_count,
                bp.len(),
                kf.len(),
                scenario.topology.edges.len(),
                scenario.topology.gm + 1
            )
            .map_err(|e| late(e.into()))
        }
    }
}

fn print_marginals(out: &mut impl Write, trial: u64, exact: &ExactMarginals) -> io::Result<()> {
    writeln!(out, "exact offset marginals vs grand master, trial {trial} (ns)")?;
    writeln!(out, "{:>4}  {:>16}  {:>16}", "node", "mean", "std")?;
    for (&node, &mean) in &exact.mean_ns {
        let std = exact.var_ns2[&node].sqrt();
        writeln!(out, "{:>4}  {:>16.9}  {:>16.9}", node + 1, mean, std)?;
    }
    Ok(())
}

fn print_training(
    out: &mut impl Write,
    trial: u64,
    scenario: &Scenario,
    setup: &TrialSetup,
) -> io::Result<()> {
    writeln!(
        out,
        "trained link noise, trial {trial} ({} rounds per link)",
        scenario.exchange.training_rounds
    )?;
    writeln!(out, "{:>7}  {:>13}  {:>13}", "link", "alpha_hat", "sigma2_ns2")?;
    for &(a, b) in &scenario.topology.edges {
        let t = &setup.training[&(a.min(b), a.max(b))];
        let link = format!("{}-{}", a + 1, b + 1);
        writeln!(out, "{link:>7}  {:>13.9}  {:>13.6}", t.alpha_hat, t.sigma2_hat)?;
    }
    Ok(())
}
