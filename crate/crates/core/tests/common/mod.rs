#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use reward_predictive::approximator::FitConfig;
use reward_predictive::eval::{oracle_partition, OracleTolerance};
use reward_predictive::lsfm::ClusterAssignment;
use reward_predictive::mdp::{random_planted_mdp, Observation, PlantedMdp, PlantedMdpParams, TrajectoryDataset};
use reward_predictive::refine::RefineConfig;

/// Tabular settings under which exact refinement must recover the oracle.
///
/// `eps_psi` sits under the matching bound (0.22 at γ = 0.4) and under the
/// smallest SF gap between distinct blocks of quantum-4 planted MDPs (just over 0.1);
/// above that gap refinement correctly merges blocks the exact oracle keeps apart.
pub fn exact_refine_config() -> RefineConfig {
    RefineConfig {
        eps_r: 0.5,
        eps_psi: 0.05,
        gamma: 0.4,
        spurious_fraction: 0.0,
        reward_model: FitConfig::Tabular,
        sf_model: FitConfig::Tabular,
        representation_model: FitConfig::Tabular,
        ..RefineConfig::default()
    }
}

/// Planted MDP number `case`: at most 12 states and 4 actions.
pub fn planted_case(case: u64) -> PlantedMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE ^ case);
    let c = case as usize;
    let params = PlantedMdpParams {
        states: 3 + c % 9,
        blocks: 1 + c % 4,
        actions: 1 + (c / 4) % 4,
        quantum: 4,
        with_terminal: c % 3 != 2,
    };
    let params = PlantedMdpParams {
        blocks: params.blocks.min(params.states),
        ..params
    };
    random_planted_mdp(&mut rng, &params).expect("valid parameters")
}

/// A hidden-state clustering re-indexed onto the dataset's instances.
pub fn on_instances(data: &TrajectoryDataset, by_state: &ClusterAssignment) -> ClusterAssignment {
    let labels = data
        .instances()
        .iter()
        .map(|o| match o {
            Observation::Discrete(s) => by_state.partition(*s),
            other => panic!("expected a discrete instance, got {other:?}"),
        })
        .collect();
    ClusterAssignment::new(labels, by_state.partition_count(), by_state.terminal_partition()).expect("same partitions")
}

pub fn oracle_on_instances(p: &PlantedMdp, data: &TrajectoryDataset) -> ClusterAssignment {
    on_instances(data, &oracle_partition(&p.mdp, OracleTolerance::default()))
}
