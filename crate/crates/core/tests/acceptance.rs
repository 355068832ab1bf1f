//! Acceptance criteria. Each test is one criterion and prints one PASS/FAIL line.

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reward_predictive::agents::stats::rank_sum_greater;
use reward_predictive::agents::{run_transfer_suite, AgentConfig, AgentKind, TestTask, TransferSpec};
use reward_predictive::approximator::{fit_classifier, FitConfig, LabeledSaDataset, Mlp, MlpConfig};
use reward_predictive::config::ExperimentConfig;
use reward_predictive::eval::{
    check_sub_clustering, confusion_matrix, exact_sf, median, oracle_partition, projection_matrix,
    reward_sequence_error, LatentModel, OracleTolerance,
};
use reward_predictive::lsfm::{monte_carlo_sf, predict_sf, ClusterAssignment, Lsfm};
use reward_predictive::mdp::{
    make_env, random_planted_mdp, sample_trajectories, ActionId, ColumnStart, CombinationLock, EnvSpec, LockStart,
    LockVariant, Observation, PlantedMdpParams, UniformPolicy,
};
use reward_predictive::refine::{refine_to_fixpoint, RefineConfig, RefineOutcome};

/// Prints the verdict line, then fails the test if any check failed.
fn verdict(criterion: u8, name: &str, checks: &[(bool, String)]) {
    let ok = checks.iter().all(|c| c.0);
    let details: Vec<&str> = checks.iter().map(|c| c.1.as_str()).collect();
    println!("criterion {criterion} ({name}): {} | {}", if ok { "PASS" } else { "FAIL" }, details.join("; "));
    for (passed, what) in checks {
        assert!(*passed, "criterion {criterion} ({name}) failed: {what}");
    }
}

fn within(started: Instant, budget: Duration) -> (bool, String) {
    let t = started.elapsed();
    (t < budget, format!("runtime {:.1}s < {}s", t.as_secs_f64(), budget.as_secs()))
}

fn tabular_column_world() -> RefineConfig {
    RefineConfig {
        eps_r: 0.5,
        eps_psi: 1.0,
        spurious_fraction: 0.01,
        ..RefineConfig::default()
    }
}

fn knn(k: usize) -> FitConfig {
    FitConfig::Knn { k }
}

fn column_world_run(seed: u64) -> (RefineOutcome, reward_predictive::mdp::TrajectoryDataset) {
    let env = make_env(&EnvSpec::column_world(ColumnStart::RightColumn)).unwrap();
    let policy = UniformPolicy { action_count: 4 };
    let data = sample_trajectories(env.as_ref(), &policy, 1000, 100, seed).unwrap();
    let test = sample_trajectories(env.as_ref(), &policy, 100, 100, seed + 1).unwrap();
    (refine_to_fixpoint(&data, &tabular_column_world()).unwrap(), test)
}

#[test]
fn criterion_1_column_world_converges_to_four_columns() {
    let started = Instant::now();
    let (out, test) = column_world_run(7);
    let model = LatentModel::from_outcome(&out).unwrap();
    let errors = reward_sequence_error(&model, &test).unwrap();
    let worst = errors.iter().copied().fold(0.0, f64::max);
    verdict(
        1,
        "Column World convergence",
        &[
            (out.converged, format!("converged={}", out.converged)),
            (out.trace.iterations() <= 3, format!("{} refinement iterations <= 3", out.trace.iterations())),
            (
                out.assignment.non_terminal_count() == 4,
                format!("{} non-terminal partitions == 4", out.assignment.non_terminal_count()),
            ),
            (
                errors.len() == 100 && worst == 0.0,
                format!("max held-out error {worst} over {} trajectories == 0", errors.len()),
            ),
            within(started, Duration::from_secs(10)),
        ],
    );
}

#[test]
fn criterion_2_point_column_world_is_column_pure() {
    let started = Instant::now();
    let env = make_env(&EnvSpec::point_column_world(ColumnStart::RightColumn)).unwrap();
    let policy = UniformPolicy { action_count: 4 };
    let data = sample_trajectories(env.as_ref(), &policy, 1000, 100, 7).unwrap();
    let test = sample_trajectories(env.as_ref(), &policy, 100, 100, 8).unwrap();
    let cfg = RefineConfig {
        reward_model: knn(1),
        sf_model: knn(1),
        representation_model: knn(1),
        ..tabular_column_world()
    };
    let out = refine_to_fixpoint(&data, &cfg).unwrap();
    let model = LatentModel::from_outcome(&out).unwrap();
    // Every instance, ignored ones included, is classified by the representation.
    let cells = confusion_matrix(&data, &model, env.as_ref(), None).unwrap();
    let columns = cells
        .grouped(5, |l| if l == 16 { 4 } else { l % 4 }, vec!["0".into(), "1".into(), "2".into(), "3".into(), "terminal".into()])
        .unwrap();
    let purity = columns.majority_purity();
    let med = median(&reward_sequence_error(&model, &test).unwrap()).unwrap();
    verdict(
        2,
        "Point-Observation Column World",
        &[
            (purity >= 0.99, format!("column purity {purity:.4} >= 0.99")),
            (med <= 0.01, format!("median held-out error {med:.6} <= 0.01")),
            within(started, Duration::from_secs(300)),
        ],
    );
}

#[test]
fn criterion_3_scaled_lock_recovers_sixteen_blocks() {
    let started = Instant::now();
    let spec = EnvSpec::scaled_lock("3,3,*", LockVariant::None, 0.1, LockStart::Uniform);
    let env = make_env(&spec).unwrap();
    let data = sample_trajectories(env.as_ref(), &UniformPolicy { action_count: 3 }, 1000, 200, 7).unwrap();
    let cfg = RefineConfig {
        eps_r: 0.4,
        eps_psi: 0.8,
        spurious_fraction: 0.0025,
        reward_model: knn(1),
        sf_model: knn(1),
        representation_model: knn(1),
        ..RefineConfig::default()
    };
    let out = refine_to_fixpoint(&data, &cfg).unwrap();
    let model = LatentModel::from_outcome(&out).unwrap();
    let lock = CombinationLock::new(3, 4, 2, "3,3,*".parse().unwrap(), LockVariant::None, 0.1, LockStart::Uniform).unwrap();
    let cm = confusion_matrix(&data, &model, env.as_ref(), Some(&out.assignment)).unwrap();
    let names = (0..16).map(|g| format!("({},{},*)", g / 4, g % 4)).chain(["terminal".to_string()]).collect();
    let blocks = cm
        .grouped(
            17,
            |l| {
                if l == lock.sink() {
                    16
                } else {
                    let d = lock.decode(l);
                    d[0] * 4 + d[1]
                }
            },
            names,
        )
        .unwrap();
    let off = blocks.off_block_mass();
    let ignored = out.assignment.ignored_count() as f64 / data.instance_count() as f64;
    verdict(
        3,
        "scaled Combination Lock",
        &[
            (
                out.assignment.non_terminal_count() == 16,
                format!("{} non-terminal partitions == 16", out.assignment.non_terminal_count()),
            ),
            (off == 0.0, format!("off-block mass {off} == 0")),
            (ignored <= 0.005, format!("ignored fraction {:.4}% <= 0.5%", ignored * 100.0)),
            within(started, Duration::from_secs(300)),
        ],
    );
}

#[test]
fn criterion_4_exact_refinement_equals_the_oracle() {
    let started = Instant::now();
    let cfg = common::exact_refine_config();
    let mut agree = 0;
    let mut failures = Vec::new();
    let cases = 200;
    for case in 0..cases {
        let p = common::planted_case(case);
        let data = p.exhaustive_dataset().unwrap();
        let out = refine_to_fixpoint(&data, &cfg).unwrap();
        if out.assignment.same_partition(&common::oracle_on_instances(&p, &data)) {
            agree += 1;
        } else {
            failures.push(case);
        }
    }
    verdict(
        4,
        "oracle equivalence",
        &[
            (cfg.matching_condition_holds(), format!("gamma {} eps_psi {} meet the matching condition", cfg.gamma, cfg.eps_psi)),
            (agree == cases, format!("{agree}/{cases} planted MDPs match the oracle (mismatches {failures:?})")),
            within(started, Duration::from_secs(120)),
        ],
    );
}

#[test]
fn criterion_5_lsfm_identities_and_monte_carlo_sfs() {
    let mut models: Vec<(String, Lsfm)> = Vec::new();
    let snapshots = RefineConfig {
        snapshots: true,
        ..tabular_column_world()
    };
    let env = make_env(&EnvSpec::column_world(ColumnStart::RightColumn)).unwrap();
    let policy = UniformPolicy { action_count: 4 };
    for seed in 0..3 {
        let data = sample_trajectories(env.as_ref(), &policy, 1000, 100, seed).unwrap();
        let out = refine_to_fixpoint(&data, &snapshots).unwrap();
        models.extend(out.trace.entries.iter().map(|e| (format!("column world {seed}/{}", e.iteration), e.snapshot.clone().unwrap().lsfm)));
        models.push((format!("column world {seed} final"), out.lsfm));
    }
    for case in 0..50 {
        let p = common::planted_case(case);
        let out = refine_to_fixpoint(&p.exhaustive_dataset().unwrap(), &common::exact_refine_config()).unwrap();
        models.push((format!("planted {case}"), out.lsfm));
    }
    let (mut inv, mut fa) = (0.0f64, 0.0f64);
    for (_, m) in &models {
        let (a, b) = m.identity_residuals();
        inv = inv.max(a);
        fa = fa.max(b);
    }

    // Monte Carlo SFs against predictions from the exact column partition.
    let hidden = oracle_partition(&env.tabular_model().unwrap(), OracleTolerance::default());
    let data = sample_trajectories(env.as_ref(), &policy, 1000, 100, 11).unwrap();
    let c = common::on_instances(&data, &hidden);
    let gamma = 0.9;
    let lsfm = Lsfm::build(&data, &c, gamma).unwrap();
    let mut next = LabeledSaDataset::new(c.partition_count(), 4).unwrap();
    for step in data.steps() {
        next.push(data.instance(step.state).clone(), step.action, c.partition(step.next_state).unwrap(), false).unwrap();
    }
    let fi = fit_classifier(&next, &FitConfig::Tabular).unwrap();
    let mut mc_gap = 0.0f64;
    let mut column_gap = 0.0f64;
    for col in 0..4 {
        let sims: Vec<DVector<f64>> = (0..4)
            .map(|row| {
                let cell = row * 4 + col;
                let instance = data.instance_id(&Observation::Discrete(cell)).unwrap();
                let predicted = predict_sf(&c, &lsfm.f, &fi, instance, data.instance(instance), ActionId(0), gamma).unwrap();
                let sim = monte_carlo_sf(env.as_ref(), &hidden, &policy, cell, ActionId(0), gamma, 200, 40_000, cell as u64).unwrap();
                mc_gap = mc_gap.max((&predicted - &sim).amax());
                sim
            })
            .collect();
        let mean = sims.iter().sum::<DVector<f64>>() / 4.0;
        for s in &sims {
            column_gap = column_gap.max((s - &mean).amax());
        }
    }
    verdict(
        5,
        "LSFM identities",
        &[
            (inv <= 1e-8, format!("max |(I-γM̄)F - I| {inv:.2e} <= 1e-8 over {} models", models.len())),
            (fa <= 1e-8, format!("max |F_a - (I+γM_aF)| {fa:.2e} <= 1e-8")),
            (mc_gap <= 0.05, format!("Monte Carlo vs predicted SF {mc_gap:.4} <= 0.05")),
            (column_gap <= 0.05, format!("within-column SF spread {column_gap:.4} <= 0.05")),
        ],
    );
}

fn dense(raw: &[usize]) -> Vec<usize> {
    let mut seen: Vec<usize> = Vec::new();
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

fn random_mdp_and_clustering(seed: u64, k: usize) -> (reward_predictive::mdp::TabularMdp, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states = rng.gen_range(2..12);
    let params = PlantedMdpParams {
        states,
        blocks: rng.gen_range(1..=states),
        actions: rng.gen_range(1..5),
        quantum: 5,
        with_terminal: rng.gen_bool(0.5),
    };
    let mdp = random_planted_mdp(&mut rng, &params).unwrap().mdp;
    let labels = dense(&(0..mdp.state_count()).map(|_| rng.gen_range(0..k)).collect::<Vec<_>>());
    (mdp, labels)
}

#[test]
fn criterion_6_refinement_properties_hold() {
    // SF projection on 100 (MDP, sub-clustering) pairs.
    let mut projection_gap = 0.0f64;
    for pair in 0..100u64 {
        let (mdp, star_labels) = random_mdp_and_clustering(pair, 5);
        let star = ClusterAssignment::from_labels(star_labels.clone(), None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(pair ^ 0xABCD);
        let fold: Vec<usize> = (0..star.partition_count()).map(|_| rng.gen_range(0..3)).collect();
        let coarse = ClusterAssignment::from_labels(dense(&star_labels.iter().map(|l| fold[*l]).collect::<Vec<_>>()), None).unwrap();
        let gamma = rng.gen_range(0.05..0.95);
        let phi: DMatrix<f64> = projection_matrix(&coarse, &star).unwrap();
        let psi_star = exact_sf(&mdp, &star, gamma).unwrap();
        let psi = exact_sf(&mdp, &coarse, gamma).unwrap();
        for s in 0..mdp.state_count() {
            for a in 0..mdp.action_count() {
                projection_gap = projection_gap.max((&psi[s][a] - &phi * &psi_star[s][a]).amax());
            }
        }
    }

    // SF separation at three discounts.
    let mut separation = Vec::new();
    for gamma in [0.1, 0.3, 0.45] {
        let bound: f64 = 2.0 - 2.0 * gamma / (1.0 - gamma);
        let mut least = f64::INFINITY;
        for seed in 0..100u64 {
            let (mdp, labels) = random_mdp_and_clustering(seed + 1000, 4);
            let c = ClusterAssignment::from_labels(labels, None).unwrap();
            let psi = exact_sf(&mdp, &c, gamma).unwrap();
            for s in 0..mdp.state_count() {
                for t in 0..mdp.state_count() {
                    if c.partition(s) != c.partition(t) {
                        for a in 0..mdp.action_count() {
                            least = least.min((&psi[s][a] - &psi[t][a]).lp_norm(1));
                        }
                    }
                }
            }
        }
        separation.push((gamma, bound, least));
    }

    // Refinement monotonicity and sub-clustering on recorded traces.
    let mut traces = 0;
    let mut violations = 0;
    let mut check = |trace: &reward_predictive::refine::RefinementTrace, oracle: &ClusterAssignment| {
        traces += 1;
        for pair in trace.entries.windows(2) {
            violations += usize::from(!check_sub_clustering(&pair[0].assignment, &pair[1].assignment).unwrap().holds());
        }
        for e in &trace.entries {
            violations += usize::from(!check_sub_clustering(&e.assignment, oracle).unwrap().holds());
        }
    };
    for case in 0..100 {
        let p = common::planted_case(case);
        let data = p.exhaustive_dataset().unwrap();
        let out = refine_to_fixpoint(&data, &common::exact_refine_config()).unwrap();
        check(&out.trace, &common::oracle_on_instances(&p, &data));
    }
    let env = make_env(&EnvSpec::column_world(ColumnStart::RightColumn)).unwrap();
    let oracle = oracle_partition(&env.tabular_model().unwrap(), OracleTolerance::default());
    for seed in 0..5 {
        let data = sample_trajectories(env.as_ref(), &UniformPolicy { action_count: 4 }, 1000, 100, seed).unwrap();
        let out = refine_to_fixpoint(&data, &tabular_column_world()).unwrap();
        check(&out.trace, &common::on_instances(&data, &oracle));
    }

    let mut checks = vec![(projection_gap <= 1e-8, format!("SF projection gap {projection_gap:.2e} <= 1e-8 on 100 pairs"))];
    for (gamma, bound, least) in separation {
        checks.push((least >= bound - 1e-12, format!("γ={gamma}: min cross-partition L1 {least:.4} >= {bound:.4}")));
    }
    checks.push((violations == 0, format!("{violations} monotonicity/sub-clustering violations over {traces} traces")));
    verdict(6, "structural properties", &checks);
}

#[test]
fn criterion_7_reward_predictive_transfer() {
    let started = Instant::now();
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/transfer.toml");
    let cfg = ExperimentConfig::load(&path).unwrap();
    let spec = cfg.transfer.clone().unwrap();
    assert_eq!(spec.repeats, 20);
    let result = run_transfer_suite(&spec, &cfg.refine, &cfg.agent).unwrap();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let mut checks = Vec::new();
    for task in &spec.tests {
        let scratch = result.scores(&task.name, AgentKind::Scratch);
        let rp = result.scores(&task.name, AgentKind::RewardPredictive);
        let r = rank_sum_greater(&rp, &scratch).unwrap();
        checks.push((
            r.p_greater < 0.05,
            format!("{}: reward-predictive {:.4} > scratch {:.4} (p={:.4})", task.name, mean(&rp), mean(&scratch), r.p_greater),
        ));
        if task.name != "left-dial-broken" {
            let pre = result.scores(&task.name, AgentKind::PretrainedInit);
            let r = rank_sum_greater(&pre, &scratch).unwrap();
            checks.push((
                r.p_greater >= 0.05,
                format!("{}: pretrained-init {:.4} does not exceed scratch (p={:.4})", task.name, mean(&pre), r.p_greater),
            ));
        }
    }
    checks.push(within(started, Duration::from_secs(600)));
    verdict(7, "transfer comparison", &checks);
}

#[test]
fn criterion_8_numerical_hygiene() {
    // Analytic versus central-difference gradients, one instance at a time.
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = Mlp::new(6, &[12, 8], 4, &mut rng);
    let params = net.parameters();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let x = DMatrix::from_fn(1, 6, |_, _| rng.gen_range(-2.0..2.0));
        let label = [rng.gen_range(0..4)];
        let (_, grad) = net.loss_and_gradient(&x, &label);
        let fd: Vec<f64> = (0..params.len())
            .map(|i| {
                let mut p = params.clone();
                p[i] += h;
                let mut plus = net.clone();
                plus.set_parameters(&p);
                p[i] -= 2.0 * h;
                let mut minus = net.clone();
                minus.set_parameters(&p);
                (plus.loss(&x, &label) - minus.loss(&x, &label)) / (2.0 * h)
            })
            .collect();
        let (g, f) = (DVector::from_vec(grad), DVector::from_vec(fd));
        worst = worst.max((&g - &f).norm() / g.norm().max(f.norm()).max(1e-12));
    }

    // Seeded pipelines, each run twice.
    let fingerprint = |fit: FitConfig| -> Vec<u8> {
        let env = make_env(&EnvSpec::point_column_world(ColumnStart::RightColumn)).unwrap();
        let data = sample_trajectories(env.as_ref(), &UniformPolicy { action_count: 4 }, 200, 50, 5).unwrap();
        let cfg = RefineConfig {
            reward_model: fit.clone(),
            sf_model: fit.clone(),
            representation_model: fit,
            max_iterations: 4,
            seed: 9,
            ..tabular_column_world()
        };
        let out = refine_to_fixpoint(&data, &cfg).unwrap();
        let mut bytes = Vec::new();
        data.write_csv(&mut bytes).unwrap();
        out.trace.write_csv(&mut bytes).unwrap();
        out.assignment.write_csv(&mut bytes).unwrap();
        bytes.extend(out.representation.to_blob().unwrap().into_bytes());
        let dir = tempfile::tempdir().unwrap();
        LatentModel::from_outcome(&out).unwrap().write_bundle(dir.path()).unwrap();
        for f in ["lsfm/F.csv", "lsfm/F_a.csv", "lsfm/w.csv", "model.txt"] {
            bytes.extend(std::fs::read(dir.path().join(f)).unwrap());
        }
        bytes
    };
    let mlp = FitConfig::Mlp(MlpConfig {
        hidden: vec![16],
        epochs: 2,
        ..MlpConfig::default()
    });
    let knn_same = fingerprint(knn(3)) == fingerprint(knn(3));
    let mlp_same = fingerprint(mlp.clone()) == fingerprint(mlp);

    let transfer = || -> Vec<u8> {
        let spec = TransferSpec {
            train: EnvSpec::scaled_lock("3,3,*", LockVariant::None, 0.1, LockStart::Zero),
            dataset_env: Some(EnvSpec::scaled_lock("3,3,*", LockVariant::None, 0.1, LockStart::Uniform)),
            tests: vec![TestTask {
                name: "swap-digits".into(),
                env: EnvSpec::scaled_lock("1,2,*", LockVariant::SwapDigits, 0.1, LockStart::Zero),
            }],
            trajectories: 200,
            max_len: 100,
            repeats: 2,
            seed: 4,
        };
        let refine = RefineConfig {
            eps_r: 0.4,
            eps_psi: 0.8,
            reward_model: knn(1),
            sf_model: knn(1),
            representation_model: knn(1),
            ..RefineConfig::default()
        };
        let agent = AgentConfig {
            episodes: 10,
            exploration_episodes: 3,
            ..AgentConfig::default()
        };
        let result = run_transfer_suite(&spec, &refine, &agent).unwrap();
        let mut bytes = Vec::new();
        result.write_curves(&mut bytes).unwrap();
        bytes
    };
    let transfer_same = transfer() == transfer();

    verdict(
        8,
        "numerical hygiene",
        &[
            (worst <= 1e-4, format!("max gradient relative error {worst:.2e} <= 1e-4 on 50 instances")),
            (knn_same, "kNN refinement pipeline byte-identical".into()),
            (mlp_same, "MLP refinement pipeline byte-identical".into()),
            (transfer_same, "transfer curves byte-identical".into()),
        ],
    );
}
