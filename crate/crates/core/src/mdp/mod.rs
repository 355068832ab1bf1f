//! Environments, observations and offline trajectory datasets.

mod column_world;
mod dataset;
mod lock;
mod observation;
mod tabular;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use column_world::{ColumnStart, ColumnWorld, DOWN, LEFT, RIGHT, UP};
pub use dataset::{Step, Transition, TrajectoryDataset};
pub use lock::{CombinationLock, GoalPattern, LockStart, LockVariant};
pub use observation::{ActionId, ObsKey, ObsKind, Observation};
pub use tabular::{random_planted_mdp, PlantedMdp, PlantedMdpParams, TabularMdp};

/// Random stream used by every simulator in the crate.
pub type SimRng = ChaCha8Rng;

/// Result of one hidden-state transition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Outcome {
    pub next: usize,
    pub reward: f64,
    pub terminal: bool,
}

/// An episodic MDP over a finite hidden state space with an observation channel.
///
/// Implementations are immutable; all randomness comes from the caller's rng.
pub trait Environment: Send + Sync {
    fn action_count(&self) -> usize;

    /// Number of hidden states, including the absorbing terminal sink.
    fn hidden_state_count(&self) -> usize;

    fn reset(&self, rng: &mut SimRng) -> usize;

    fn step(&self, state: usize, action: ActionId, rng: &mut SimRng) -> Outcome;

    fn observe(&self, state: usize, rng: &mut SimRng) -> Observation;

    /// Observation emitted on entering a terminal state.
    fn terminal_observation(&self, state: usize) -> Observation;

    /// Hidden state that emitted `obs`, if any.
    fn label(&self, obs: &Observation) -> Option<usize>;

    fn label_name(&self, label: usize) -> String {
        label.to_string()
    }

    /// Exact hidden dynamics, when the hidden state space is enumerable.
    fn tabular_model(&self) -> Option<TabularMdp> {
        None
    }
}

/// Declarative description of a benchmark environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvSpec {
    ColumnWorld {
        #[serde(default = "default_grid")]
        size: usize,
        #[serde(default)]
        start: ColumnStart,
    },
    PointColumnWorld {
        #[serde(default = "default_grid")]
        size: usize,
        #[serde(default)]
        start: ColumnStart,
    },
    CombinationLock {
        dials: usize,
        digits: usize,
        broken_dial: usize,
        goal: GoalPattern,
        #[serde(default)]
        variant: LockVariant,
        #[serde(default)]
        noise: f64,
        #[serde(default)]
        start: LockStart,
    },
}

fn default_grid() -> usize {
    4
}

impl EnvSpec {
    pub fn column_world(start: ColumnStart) -> Self {
        EnvSpec::ColumnWorld { size: 4, start }
    }

    pub fn point_column_world(start: ColumnStart) -> Self {
        EnvSpec::PointColumnWorld { size: 4, start }
    }

    /// Three dials of four digits with the right dial broken.
    pub fn scaled_lock(goal: &str, variant: LockVariant, noise: f64, start: LockStart) -> Self {
        let broken_dial = if variant == LockVariant::LeftDialBroken { 0 } else { 2 };
        EnvSpec::CombinationLock {
            dials: 3,
            digits: 4,
            broken_dial,
            goal: goal.parse().expect("literal goal pattern"),
            variant,
            noise,
            start,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            EnvSpec::ColumnWorld { .. } => "column-world",
            EnvSpec::PointColumnWorld { .. } => "point-column-world",
            EnvSpec::CombinationLock { .. } => "combination-lock",
        }
    }
}

/// Builds the environment described by `spec`, validating every field.
pub fn make_env(spec: &EnvSpec) -> Result<Box<dyn Environment>> {
    match spec {
        EnvSpec::ColumnWorld { size, start } | EnvSpec::PointColumnWorld { size, start } => {
            if *size < 2 {
                return Err(Error::spec("size", "grid size must be >= 2"));
            }
            let points = matches!(spec, EnvSpec::PointColumnWorld { .. });
            Ok(Box::new(ColumnWorld::new(*size, *start, points)))
        }
        EnvSpec::CombinationLock {
            dials,
            digits,
            broken_dial,
            goal,
            variant,
            noise,
            start,
        } => Ok(Box::new(CombinationLock::new(
            *dials,
            *digits,
            *broken_dial,
            goal.clone(),
            *variant,
            *noise,
            *start,
        )?)),
    }
}

/// Behavior policy used to collect data.
pub trait Policy: Sync {
    fn act(&self, obs: &Observation, rng: &mut SimRng) -> ActionId;
}

#[derive(Clone, Copy, Debug)]
pub struct UniformPolicy {
    pub action_count: usize,
}

impl Policy for UniformPolicy {
    fn act(&self, _obs: &Observation, rng: &mut SimRng) -> ActionId {
        ActionId(rng.gen_range(0..self.action_count))
    }
}

/// Rolls out `count` trajectories of at most `max_len` steps.
///
/// Trajectory `i` draws from stream `i` of a generator seeded with `seed`, so
/// the result does not depend on thread scheduling.
pub fn sample_trajectories(
    env: &dyn Environment,
    policy: &dyn Policy,
    count: usize,
    max_len: usize,
    seed: u64,
) -> Result<TrajectoryDataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be >= 1".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be >= 1".into()));
    }
    let trajectories: Vec<Vec<Transition>> = (0..count)
        .into_par_iter()
        .map(|i| {
            let mut rng = SimRng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            rollout(env, policy, max_len, &mut rng)
        })
        .collect();
    TrajectoryDataset::from_trajectories(env.action_count(), trajectories)
}

fn rollout(env: &dyn Environment, policy: &dyn Policy, max_len: usize, rng: &mut SimRng) -> Vec<Transition> {
    let mut state = env.reset(rng);
    let mut obs = env.observe(state, rng);
    let mut out = Vec::with_capacity(max_len.min(256));
    for _ in 0..max_len {
        let action = policy.act(&obs, rng);
        let o = env.step(state, action, rng);
        let next_obs = if o.terminal {
            env.terminal_observation(o.next)
        } else {
            env.observe(o.next, rng)
        };
        out.push(Transition {
            state: obs,
            action,
            reward: o.reward,
            next_state: next_obs.clone(),
            next_is_terminal: o.terminal,
        });
        if o.terminal {
            break;
        }
        state = o.next;
        obs = next_obs;
    }
    out
}

/// Hidden states of an environment plus its observation labeling.
pub struct GroundTruth<'a> {
    env: &'a dyn Environment,
    /// Non-terminal hidden states.
    pub states: Vec<usize>,
    /// Id of the absorbing terminal sink.
    pub sink: usize,
    pub model: TabularMdp,
}

impl GroundTruth<'_> {
    pub fn label(&self, obs: &Observation) -> Option<usize> {
        self.env.label(obs)
    }

    pub fn name(&self, label: usize) -> String {
        self.env.label_name(label)
    }
}

pub fn enumerate_ground_states(env: &dyn Environment) -> Result<GroundTruth<'_>> {
    let model = env
        .tabular_model()
        .ok_or_else(|| Error::Unsupported("environment has no enumerable hidden state".into()))?;
    let states: Vec<usize> = (0..model.state_count())
        .filter(|&s| !model.is_terminal_state(s))
        .collect();
    let sink = (0..model.state_count())
        .find(|&s| model.is_terminal_state(s))
        .unwrap_or(model.state_count());
    Ok(GroundTruth {
        env,
        states,
        sink,
        model,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ground_state_counts() {
        let cw = make_env(&EnvSpec::column_world(ColumnStart::LeftColumn)).unwrap();
        assert_eq!(enumerate_ground_states(cw.as_ref()).unwrap().states.len(), 16);
        let lock = make_env(&EnvSpec::scaled_lock("3,3,*", LockVariant::None, 0.0, LockStart::Zero)).unwrap();
        assert_eq!(enumerate_ground_states(lock.as_ref()).unwrap().states.len(), 64);
    }

    #[test]
    fn sampling_rejects_zero_counts() {
        let env = make_env(&EnvSpec::scaled_lock("3,3,*", LockVariant::None, 0.1, LockStart::Zero)).unwrap();
        let pi = UniformPolicy { action_count: 3 };
        assert!(sample_trajectories(env.as_ref(), &pi, 0, 100, 1).is_err());
        assert!(sample_trajectories(env.as_ref(), &pi, 1, 0, 1).is_err());
    }

    #[test]
    fn trajectories_respect_length_cap() {
        let env = make_env(&EnvSpec::column_world(ColumnStart::LeftColumn)).unwrap();
        let pi = UniformPolicy { action_count: 4 };
        let ds = sample_trajectories(env.as_ref(), &pi, 10, 5, 3).unwrap();
        assert_eq!(ds.trajectory_count(), 10);
        assert!(ds.trajectories().iter().all(|t| t.len() <= 5));
    }

    #[test]
    fn sampling_is_reproducible() {
        let env = make_env(&EnvSpec::point_column_world(ColumnStart::Uniform)).unwrap();
        let pi = UniformPolicy { action_count: 4 };
        let mut a = Vec::new();
        let mut b = Vec::new();
        sample_trajectories(env.as_ref(), &pi, 50, 20, 7).unwrap().write_csv(&mut a).unwrap();
        sample_trajectories(env.as_ref(), &pi, 50, 20, 7).unwrap().write_csv(&mut b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_parses_from_toml() {
        let spec: EnvSpec = toml::from_str(
            "kind = \"combination-lock\"\ndials = 3\ndigits = 4\nbroken_dial = 2\ngoal = \"3,3,*\"\nnoise = 0.1\n",
        )
        .unwrap();
        assert_eq!(spec, EnvSpec::scaled_lock("3,3,*", LockVariant::None, 0.1, LockStart::Zero));
    }
}
