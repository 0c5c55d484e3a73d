//! Shared fixtures for the criterion benchmarks.

use syncnet_core::hybrid::{prepare_trial, TrialSetup};
use syncnet_core::model::{Scenario, TrialRng, WorldInstance};

/// Default scenario with a sampled world and its stamp-noise stream.
pub fn default_fixture() -> (Scenario, WorldInstance, TrialRng) {
    let s = Scenario::default();
    let world = s.sample_instance(0).expect("default scenario is valid");
    let rng = s.exchange_rng(0);
    (s, world, rng)
}

/// Prepared trial 0 with every node labeled a BP variable.
pub fn whole_network_setup() -> (Scenario, WorldInstance, TrialSetup) {
    let s = Scenario::default().with_all_bp();
    let world = s.sample_instance(0).expect("default scenario is valid");
    let mut rng = s.exchange_rng(0);
    let setup = prepare_trial(&world, &s, &mut rng).expect("trial prepares");
    (s, world, setup)
}
