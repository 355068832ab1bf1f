//! One-step Q-learning agents that differ only in representation and initialization.

pub mod stats;
mod transfer;

use std::collections::HashMap;
use std::io::Write;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::approximator::Classifier;
use crate::error::{Error, Result};
use crate::mdp::{ActionId, Environment, ObsKey, Observation, SimRng};

pub use transfer::{run_transfer_suite, TestTask, TransferResult, TransferRow, TransferSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AgentKind {
    /// Zero-initialized Q over raw observations.
    Scratch,
    /// Same structure as scratch, initialized from another task's parameters.
    PretrainedInit,
    /// Q over the partitions of a frozen state classifier.
    RewardPredictive,
}

impl AgentKind {
    pub const ALL: [AgentKind; 3] = [AgentKind::Scratch, AgentKind::PretrainedInit, AgentKind::RewardPredictive];

    pub fn name(self) -> &'static str {
        match self {
            AgentKind::Scratch => "scratch",
            AgentKind::PretrainedInit => "pretrained-init",
            AgentKind::RewardPredictive => "reward-predictive",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub kind: AgentKind,
    pub learning_rate: f64,
    pub episodes: usize,
    /// Episodes over which the greedy probability rises linearly from 0 to 1.
    pub exploration_episodes: usize,
    pub gamma: f64,
    pub max_steps: usize,
    pub seed: u64,
    #[serde(skip)]
    pub representation: Option<Arc<Classifier>>,
    #[serde(skip)]
    pub pretrained: Option<QFunction>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            kind: AgentKind::Scratch,
            learning_rate: 1e-3,
            episodes: 100,
            exploration_episodes: 10,
            gamma: 0.9,
            max_steps: 500,
            seed: 0,
            representation: None,
            pretrained: None,
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::spec("learning_rate", "must be positive"));
        }
        if self.exploration_episodes > self.episodes {
            return Err(Error::spec("exploration_episodes", "must not exceed episodes"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::spec("gamma", "must lie in [0, 1)"));
        }
        if self.max_steps == 0 {
            return Err(Error::spec("max_steps", "must be positive"));
        }
        match self.kind {
            AgentKind::RewardPredictive if self.representation.is_none() => {
                Err(Error::Config("reward-predictive agent needs a representation".into()))
            }
            AgentKind::PretrainedInit if self.pretrained.is_none() => {
                Err(Error::Config("pretrained-init agent needs pretrained parameters".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Action values of one agent.
#[derive(Clone, Debug, PartialEq)]
pub enum QFunction {
    /// One row per observed discrete state.
    Tabular {
        action_count: usize,
        table: HashMap<ObsKey, Vec<f64>>,
    },
    /// `Q(s, a) = θ_a · [x(s), 1]`.
    Linear { theta: DMatrix<f64> },
    /// `Q(s, a) = θ_a · e_{φ(s)}` for a frozen classifier `φ`.
    Latent { theta: DMatrix<f64> },
}

/// Inputs a Q-function reads for one observation.
enum Features<'a> {
    Key(ObsKey),
    Vector(&'a [f64]),
    Partition(usize),
}

impl QFunction {
    /// Zero-initialized values suited to raw observations of `obs`.
    pub fn zeros_for(obs: &Observation, action_count: usize) -> Self {
        match obs {
            Observation::Discrete(_) => QFunction::Tabular {
                action_count,
                table: HashMap::new(),
            },
            Observation::Vector(v) => QFunction::Linear {
                theta: DMatrix::zeros(action_count, v.len() + 1),
            },
        }
    }

    pub fn latent(partitions: usize, action_count: usize) -> Self {
        QFunction::Latent {
            theta: DMatrix::zeros(action_count, partitions),
        }
    }

    pub fn action_count(&self) -> usize {
        match self {
            QFunction::Tabular { action_count, .. } => *action_count,
            QFunction::Linear { theta } | QFunction::Latent { theta } => theta.nrows(),
        }
    }

    fn values(&self, f: &Features) -> Result<Vec<f64>> {
        match (self, f) {
            (QFunction::Tabular { action_count, table }, Features::Key(k)) => {
                Ok(table.get(k).cloned().unwrap_or_else(|| vec![0.0; *action_count]))
            }
            (QFunction::Linear { theta }, Features::Vector(x)) => {
                check_len(theta.ncols(), x.len() + 1)?;
                Ok((0..theta.nrows())
                    .map(|a| x.iter().enumerate().map(|(j, v)| theta[(a, j)] * v).sum::<f64>() + theta[(a, x.len())])
                    .collect())
            }
            (QFunction::Latent { theta }, Features::Partition(p)) => {
                if *p >= theta.ncols() {
                    return Err(Error::Dimension {
                        expected: theta.ncols(),
                        found: p + 1,
                    });
                }
                Ok(theta.column(*p).iter().copied().collect())
            }
            _ => Err(Error::Unsupported("observation does not fit this Q-function".into())),
        }
    }

    /// Moves `Q(s, a)` toward `target` by one semi-gradient step.
    fn update(&mut self, f: &Features, a: ActionId, target: f64, alpha: f64) -> Result<()> {
        let current = self.values(f)?[a.0];
        let delta = alpha * (target - current);
        match (self, f) {
            (QFunction::Tabular { action_count, table }, Features::Key(k)) => {
                table.entry(k.clone()).or_insert_with(|| vec![0.0; *action_count])[a.0] += delta;
            }
            (QFunction::Linear { theta }, Features::Vector(x)) => {
                for (j, v) in x.iter().enumerate() {
                    theta[(a.0, j)] += delta * v;
                }
                let bias = x.len();
                theta[(a.0, bias)] += delta;
            }
            (QFunction::Latent { theta }, Features::Partition(p)) => theta[(a.0, *p)] += delta,
            _ => unreachable!("values() rejected the mismatch"),
        }
        Ok(())
    }
}

fn check_len(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::Dimension { expected, found });
    }
    Ok(())
}

/// Lowest index among the maximal values.
pub fn greedy(values: &[f64]) -> ActionId {
    ActionId(crate::approximator::argmax(values))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeStats {
    pub steps: usize,
    pub reward: f64,
    pub reward_per_step: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LearningCurve {
    pub episodes: Vec<EpisodeStats>,
}

impl LearningCurve {
    /// Total reward divided by total steps over all episodes.
    pub fn reward_per_step(&self) -> f64 {
        let steps: usize = self.episodes.iter().map(|e| e.steps).sum();
        let reward: f64 = self.episodes.iter().map(|e| e.reward).sum();
        if steps == 0 {
            0.0
        } else {
            reward / steps as f64
        }
    }

    /// Appends `task,agent,repeat,episode,steps,reward,reward_per_step` rows.
    pub fn write_rows<W: Write>(&self, w: &mut csv::Writer<W>, task: &str, agent: &str, repeat: usize) -> Result<()> {
        for (e, s) in self.episodes.iter().enumerate() {
            w.write_record([
                task.to_string(),
                agent.to_string(),
                repeat.to_string(),
                e.to_string(),
                s.steps.to_string(),
                format!("{:?}", s.reward),
                format!("{:?}", s.reward_per_step),
            ])?;
        }
        Ok(())
    }
}

pub const CURVE_HEADER: [&str; 7] = ["task", "agent", "repeat", "episode", "steps", "reward", "reward_per_step"];

fn features<'a>(kind: AgentKind, representation: Option<&Classifier>, obs: &'a Observation) -> Result<Features<'a>> {
    Ok(match (kind, obs) {
        (AgentKind::RewardPredictive, _) => {
            Features::Partition(representation.expect("validated").predict_class(obs, ActionId(0))?)
        }
        (_, Observation::Discrete(_)) => Features::Key(obs.key()),
        (_, Observation::Vector(v)) => Features::Vector(v),
    })
}

/// Runs one agent for `cfg.episodes` episodes of ε-greedy one-step Q-learning.
pub fn run_agent(env: &dyn Environment, cfg: &AgentConfig) -> Result<(LearningCurve, QFunction)> {
    cfg.validate()?;
    let actions = env.action_count();
    let mut rng = SimRng::seed_from_u64(cfg.seed);
    let probe = {
        let mut probe_rng = SimRng::seed_from_u64(cfg.seed);
        let s = env.reset(&mut probe_rng);
        env.observe(s, &mut probe_rng)
    };
    let representation = cfg.representation.as_deref();
    let mut q = match cfg.kind {
        AgentKind::Scratch => QFunction::zeros_for(&probe, actions),
        AgentKind::PretrainedInit => cfg.pretrained.clone().expect("validated"),
        AgentKind::RewardPredictive => {
            let r = representation.expect("validated");
            QFunction::latent(r.class_count(), actions)
        }
    };
    if q.action_count() != actions {
        return Err(Error::Dimension {
            expected: actions,
            found: q.action_count(),
        });
    }
    let mut curve = LearningCurve::default();
    for episode in 0..cfg.episodes {
        let greedy_probability = if cfg.exploration_episodes == 0 {
            1.0
        } else {
            (episode as f64 / cfg.exploration_episodes as f64).min(1.0)
        };
        let mut state = env.reset(&mut rng);
        let mut obs = env.observe(state, &mut rng);
        let mut steps = 0;
        let mut total = 0.0;
        while steps < cfg.max_steps {
            let f = features(cfg.kind, representation, &obs)?;
            let action = if rng.gen::<f64>() < greedy_probability {
                greedy(&q.values(&f)?)
            } else {
                ActionId(rng.gen_range(0..actions))
            };
            let out = env.step(state, action, &mut rng);
            let next_obs = if out.terminal {
                env.terminal_observation(out.next)
            } else {
                env.observe(out.next, &mut rng)
            };
            let bootstrap = if out.terminal {
                0.0
            } else {
                let v = q.values(&features(cfg.kind, representation, &next_obs)?)?;
                v.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            };
            q.update(&f, action, out.reward + cfg.gamma * bootstrap, cfg.learning_rate)?;
            total += out.reward;
            steps += 1;
            if out.terminal {
                break;
            }
            state = out.next;
            obs = next_obs;
        }
        curve.episodes.push(EpisodeStats {
            steps,
            reward: total,
            reward_per_step: total / steps as f64,
        });
    }
    Ok((curve, q))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{fit_classifier, FitConfig, LabeledSaDataset};
    use crate::mdp::{make_env, ColumnStart, EnvSpec, LockStart, LockVariant, TabularMdp};

    #[test]
    fn tabular_td_update_matches_hand_computation() {
        let mut q = QFunction::zeros_for(&Observation::Discrete(0), 2);
        let s0 = Features::Key(Observation::Discrete(0).key());
        let s1 = Features::Key(Observation::Discrete(1).key());
        q.update(&s0, ActionId(0), 0.5 / 0.1, 0.1).unwrap();
        q.update(&s1, ActionId(1), 0.8 / 0.1, 0.1).unwrap();
        q.update(&s1, ActionId(0), 0.2 / 0.1, 0.1).unwrap();
        assert_eq!(q.values(&s0).unwrap(), vec![0.5, 0.0]);
        // r = 1, γ = 0.9: target 1 + 0.9·0.8 = 1.72, new value 0.5 + 0.1·1.22.
        let bootstrap = q.values(&s1).unwrap().into_iter().fold(f64::NEG_INFINITY, f64::max);
        q.update(&s0, ActionId(0), 1.0 + 0.9 * bootstrap, 0.1).unwrap();
        assert!((q.values(&s0).unwrap()[0] - 0.622).abs() <= 1e-12);
    }

    #[test]
    fn linear_td_update_moves_along_features() {
        let x = [1.0, 0.5];
        let mut q = QFunction::zeros_for(&Observation::Vector(x.to_vec()), 2);
        let f = Features::Vector(&x);
        q.update(&f, ActionId(1), 2.0, 0.1).unwrap();
        let QFunction::Linear { theta } = &q else { panic!("linear expected") };
        assert_eq!(theta.row(1).iter().copied().collect::<Vec<_>>(), vec![0.2, 0.1, 0.2]);
        assert!((q.values(&f).unwrap()[1] - 0.45).abs() <= 1e-12);
        assert!(q.values(&Features::Vector(&[1.0])).is_err());
    }

    fn optimal_table(mdp: &TabularMdp, gamma: f64) -> QFunction {
        let q = mdp.optimal_q(gamma, 1e-13);
        QFunction::Tabular {
            action_count: mdp.action_count(),
            table: q
                .into_iter()
                .enumerate()
                .map(|(s, v)| (Observation::Discrete(s).key(), v))
                .collect(),
        }
    }

    #[test]
    fn greedy_agent_with_optimal_values_walks_the_shortest_path() {
        let env = make_env(&EnvSpec::column_world(ColumnStart::LeftColumn)).unwrap();
        let mdp = env.tabular_model().unwrap();
        let cfg = AgentConfig {
            kind: AgentKind::PretrainedInit,
            exploration_episodes: 0,
            episodes: 20,
            pretrained: Some(optimal_table(&mdp, 0.9)),
            ..AgentConfig::default()
        };
        let (curve, _) = run_agent(env.as_ref(), &cfg).unwrap();
        for e in &curve.episodes {
            assert_eq!((e.steps, e.reward), (3, 1.0));
        }
        assert!((curve.reward_per_step() - 1.0 / 3.0).abs() < 1e-12);
    }

    fn lock_representation() -> Arc<Classifier> {
        // Latent state = (left digit, middle digit) of a noiseless one-hot lock observation.
        let lock = make_env(&EnvSpec::scaled_lock("3,3,*", LockVariant::None, 0.0, LockStart::Zero)).unwrap();
        let mut data = LabeledSaDataset::new(17, 1).unwrap();
        let mut rng = SimRng::seed_from_u64(0);
        for s in 0..64 {
            data.push(lock.observe(s, &mut rng), ActionId(0), s / 4, false).unwrap();
        }
        data.push(lock.terminal_observation(64), ActionId(0), 16, false).unwrap();
        Arc::new(fit_classifier(&data, &FitConfig::Knn { k: 1 }).unwrap())
    }

    #[test]
    fn representation_stays_frozen_and_runs_are_reproducible() {
        let env = make_env(&EnvSpec::scaled_lock("1,2,*", LockVariant::SwapDigits, 0.1, LockStart::Zero)).unwrap();
        let representation = lock_representation();
        let before = representation.to_blob().unwrap();
        let cfg = AgentConfig {
            kind: AgentKind::RewardPredictive,
            episodes: 30,
            seed: 4,
            representation: Some(Arc::clone(&representation)),
            ..AgentConfig::default()
        };
        let (a, qa) = run_agent(env.as_ref(), &cfg).unwrap();
        let (b, qb) = run_agent(env.as_ref(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(qa, qb);
        assert_eq!(representation.to_blob().unwrap(), before);
        assert_eq!(a.episodes.len(), 30);
        assert!(a.episodes.iter().all(|e| e.steps <= cfg.max_steps));
    }

    #[test]
    fn missing_parameters_are_config_errors() {
        let env = make_env(&EnvSpec::column_world(ColumnStart::LeftColumn)).unwrap();
        for kind in [AgentKind::PretrainedInit, AgentKind::RewardPredictive] {
            let cfg = AgentConfig { kind, ..AgentConfig::default() };
            assert!(matches!(run_agent(env.as_ref(), &cfg), Err(Error::Config(_))));
        }
        let cfg = AgentConfig {
            exploration_episodes: 200,
            ..AgentConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Spec { .. })));
    }

    #[test]
    fn single_repeat_gives_one_row_per_cell() {
        let spec = TransferSpec {
            train: EnvSpec::column_world(ColumnStart::RightColumn),
            dataset_env: None,
            tests: vec![
                TestTask {
                    name: "left".into(),
                    env: EnvSpec::column_world(ColumnStart::LeftColumn),
                },
                TestTask {
                    name: "uniform".into(),
                    env: EnvSpec::column_world(ColumnStart::Uniform),
                },
            ],
            trajectories: 200,
            max_len: 100,
            repeats: 1,
            seed: 3,
        };
        let agent = AgentConfig {
            episodes: 15,
            ..AgentConfig::default()
        };
        let result = run_transfer_suite(&spec, &crate::refine::RefineConfig::default(), &agent).unwrap();
        assert_eq!(result.rows.len(), 6);
        assert_eq!(result.partition_counts, vec![4]);
        assert_eq!(result.scores("left", AgentKind::Scratch).len(), 1);
        let mut buf = Vec::new();
        result.write_summary(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 7);
    }

}
