//! Properties the convergence argument relies on, checked on exact models.

mod common;

use nalgebra::DVector;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reward_predictive::eval::{check_sub_clustering, exact_sf, oracle_partition, projection_matrix, OracleTolerance};
use reward_predictive::lsfm::ClusterAssignment;
use reward_predictive::mdp::{make_env, random_planted_mdp, sample_trajectories, ColumnStart, EnvSpec, PlantedMdpParams, TabularMdp, UniformPolicy};
use reward_predictive::refine::{refine_to_fixpoint, RefineConfig, RefinementTrace};

/// Relabels by first appearance so that no partition is empty.
fn dense(raw: &[usize]) -> Vec<usize> {
    let mut seen = Vec::new();
    raw.iter()
        .map(|r| match seen.iter().position(|x| x == r) {
            Some(i) => i,
            None => {
                seen.push(*r);
                seen.len() - 1
            }
        })
        .collect()
}

fn random_mdp(seed: u64) -> TabularMdp {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = rng.gen_range(2..10);
    let params = PlantedMdpParams {
        states,
        blocks: rng.gen_range(1..=states),
        actions: rng.gen_range(1..4),
        quantum: 5,
        with_terminal: rng.gen_bool(0.5),
    };
    random_planted_mdp(&mut rng, &params).unwrap().mdp
}

fn random_clustering(n: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    dense(&(0..n).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn sf_of_a_coarsening_is_the_projected_sf(seed in any::<u64>(), k in 1usize..6, merge in 1usize..4, gamma in 0.05f64..0.95) {
        let mdp = random_mdp(seed);
        let n = mdp.state_count();
        let star_labels = random_clustering(n, k, seed ^ 1);
        let star = ClusterAssignment::from_labels(star_labels.clone(), None).unwrap();
        // Merge c* blocks through a random map to get a sub-clustering.
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 2);
        let fold: Vec<usize> = (0..star.partition_count()).map(|_| rng.gen_range(0..merge)).collect();
        let coarse = ClusterAssignment::from_labels(dense(&star_labels.iter().map(|l| fold[*l]).collect::<Vec<_>>()), None).unwrap();
        let phi = projection_matrix(&coarse, &star).unwrap();
        let psi_star = exact_sf(&mdp, &star, gamma).unwrap();
        let psi = exact_sf(&mdp, &coarse, gamma).unwrap();
        for s in 0..n {
            for a in 0..mdp.action_count() {
                let projected = &phi * &psi_star[s][a];
                prop_assert!((&psi[s][a] - projected).amax() <= 1e-8, "state {} action {}", s, a);
            }
        }
    }

    #[test]
    fn cross_partition_sfs_are_separated(seed in any::<u64>(), k in 2usize..6, gi in 0usize..3) {
        let gamma = [0.1, 0.3, 0.45][gi];
        let bound = 2.0 - 2.0 * gamma / (1.0 - gamma);
        let mdp = random_mdp(seed);
        let n = mdp.state_count();
        let c = ClusterAssignment::from_labels(random_clustering(n, k, seed ^ 3), None).unwrap();
        let psi = exact_sf(&mdp, &c, gamma).unwrap();
        for s in 0..n {
            for t in 0..n {
                if c.partition(s) == c.partition(t) {
                    continue;
                }
                for a in 0..mdp.action_count() {
                    let d: DVector<f64> = &psi[s][a] - &psi[t][a];
                    prop_assert!(d.lp_norm(1) >= bound - 1e-12, "{} < {}", d.lp_norm(1), bound);
                }
            }
        }
    }
}

/// Each clustering refines the previous one and never separates what `oracle` joins.
fn assert_trace_properties(trace: &RefinementTrace, oracle: &ClusterAssignment, what: &str) {
    for pair in trace.entries.windows(2) {
        let (a, b) = (&pair[0].assignment, &pair[1].assignment);
        assert!(
            check_sub_clustering(a, b).unwrap().holds(),
            "{what}: iteration {} is not refined by {}",
            pair[0].iteration,
            pair[1].iteration
        );
    }
    for e in &trace.entries {
        assert!(
            check_sub_clustering(&e.assignment, oracle).unwrap().holds(),
            "{what}: iteration {} separates states the oracle joins",
            e.iteration
        );
    }
}

#[test]
fn traces_on_planted_mdps_refine_monotonically_towards_the_oracle() {
    for case in 0..100 {
        let p = common::planted_case(case);
        let data = p.exhaustive_dataset().unwrap();
        let outcome = refine_to_fixpoint(&data, &common::exact_refine_config()).unwrap();
        assert_trace_properties(&outcome.trace, &common::oracle_on_instances(&p, &data), &format!("case {case}"));
    }
}

#[test]
fn column_world_traces_refine_monotonically_towards_the_oracle() {
    let env = make_env(&EnvSpec::column_world(ColumnStart::RightColumn)).unwrap();
    let oracle = oracle_partition(&env.tabular_model().unwrap(), OracleTolerance::default());
    let policy = UniformPolicy { action_count: 4 };
    for seed in 0..5 {
        let data = sample_trajectories(env.as_ref(), &policy, 1000, 100, seed).unwrap();
        let outcome = refine_to_fixpoint(&data, &RefineConfig::default()).unwrap();
        assert!(outcome.converged);
        assert_trace_properties(&outcome.trace, &common::on_instances(&data, &oracle), &format!("seed {seed}"));
    }
}
