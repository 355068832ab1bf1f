use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::mdp::{ActionId, Environment, Observation, Outcome, SimRng, Transition, TrajectoryDataset};

/// A finite MDP given by complete transition and expected-reward tables.
///
/// Terminal states are absorbing with zero reward. Observations are
/// `Discrete(state)`.
#[derive(Clone, Debug)]
pub struct TabularMdp {
    state_count: usize,
    action_count: usize,
    /// `transitions[a][(s, s')]`, each row a probability distribution.
    transitions: Vec<DMatrix<f64>>,
    /// `rewards[a][s]`: expected one-step reward.
    rewards: Vec<Vec<f64>>,
    terminal: Vec<bool>,
    starts: Vec<usize>,
}

impl TabularMdp {
    pub fn new(
        transitions: Vec<DMatrix<f64>>,
        rewards: Vec<Vec<f64>>,
        terminal: Vec<bool>,
    ) -> Result<Self> {
        let action_count = transitions.len();
        if action_count == 0 {
            return Err(Error::spec("transitions", "at least one action is required"));
        }
        let n = terminal.len();
        if n == 0 {
            return Err(Error::spec("terminal", "at least one state is required"));
        }
        if rewards.len() != action_count {
            return Err(Error::spec("rewards", "one reward vector per action"));
        }
        for (a, p) in transitions.iter().enumerate() {
            if p.nrows() != n || p.ncols() != n {
                return Err(Error::spec("transitions", format!("action {a} is not {n}x{n}")));
            }
            for s in 0..n {
                let row = p.row(s);
                if row.iter().any(|x| *x < 0.0) || (row.sum() - 1.0).abs() > 1e-9 {
                    return Err(Error::spec(
                        "transitions",
                        format!("action {a} row {s} is not a distribution"),
                    ));
                }
            }
            if rewards[a].len() != n {
                return Err(Error::spec("rewards", format!("action {a} has wrong length")));
            }
        }
        let starts: Vec<usize> = (0..n).filter(|&s| !terminal[s]).collect();
        if starts.is_empty() {
            return Err(Error::spec("terminal", "every state is terminal"));
        }
        Ok(TabularMdp {
            state_count: n,
            action_count,
            transitions,
            rewards,
            terminal,
            starts,
        })
    }

    /// Restricts `reset` to the given start states.
    pub fn with_starts(mut self, starts: Vec<usize>) -> Result<Self> {
        if starts.is_empty() || starts.iter().any(|&s| s >= self.state_count || self.terminal[s]) {
            return Err(Error::spec("starts", "start states must be non-terminal and in range"));
        }
        self.starts = starts;
        Ok(self)
    }

    pub fn state_count(&self) -> usize {
        self.state_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn transition(&self, action: ActionId) -> &DMatrix<f64> {
        &self.transitions[action.0]
    }

    pub fn probability(&self, s: usize, a: ActionId, next: usize) -> f64 {
        self.transitions[a.0][(s, next)]
    }

    pub fn reward(&self, s: usize, a: ActionId) -> f64 {
        self.rewards[a.0][s]
    }

    pub fn is_terminal_state(&self, s: usize) -> bool {
        self.terminal[s]
    }

    pub fn terminal_states(&self) -> &[bool] {
        &self.terminal
    }

    /// Optimal action values by value iteration (terminal states have value zero).
    pub fn optimal_q(&self, gamma: f64, tolerance: f64) -> Vec<Vec<f64>> {
        let n = self.state_count;
        let mut q = vec![vec![0.0; self.action_count]; n];
        loop {
            let v: Vec<f64> = q
                .iter()
                .enumerate()
                .map(|(s, row)| {
                    if self.terminal[s] {
                        0.0
                    } else {
                        row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                    }
                })
                .collect();
            let mut delta: f64 = 0.0;
            for s in 0..n {
                if self.terminal[s] {
                    continue;
                }
                for a in 0..self.action_count {
                    let p = &self.transitions[a];
                    let next: f64 = (0..n).map(|t| p[(s, t)] * v[t]).sum();
                    let updated = self.rewards[a][s] + gamma * next;
                    delta = delta.max((updated - q[s][a]).abs());
                    q[s][a] = updated;
                }
            }
            if delta < tolerance {
                return q;
            }
        }
    }
}

impl Environment for TabularMdp {
    fn action_count(&self) -> usize {
        self.action_count
    }

    fn hidden_state_count(&self) -> usize {
        self.state_count
    }

    fn reset(&self, rng: &mut SimRng) -> usize {
        *self.starts.choose(rng).expect("starts is non-empty")
    }

    fn step(&self, state: usize, action: ActionId, rng: &mut SimRng) -> Outcome {
        let p = &self.transitions[action.0];
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut next = self.state_count - 1;
        for t in 0..self.state_count {
            acc += p[(state, t)];
            if u < acc {
                next = t;
                break;
            }
        }
        // Guard against rounding in the cumulative sum landing on a zero-mass state.
        if p[(state, next)] == 0.0 {
            next = (0..self.state_count)
                .rev()
                .find(|&t| p[(state, t)] > 0.0)
                .expect("row is a distribution");
        }
        Outcome {
            next,
            reward: self.rewards[action.0][state],
            terminal: self.terminal[next],
        }
    }

    fn observe(&self, state: usize, _rng: &mut SimRng) -> Observation {
        Observation::Discrete(state)
    }

    fn terminal_observation(&self, state: usize) -> Observation {
        Observation::Discrete(state)
    }

    fn label(&self, obs: &Observation) -> Option<usize> {
        match obs {
            Observation::Discrete(s) if *s < self.state_count => Some(*s),
            _ => None,
        }
    }

    fn tabular_model(&self) -> Option<TabularMdp> {
        Some(self.clone())
    }
}

/// Parameters for [`random_planted_mdp`].
#[derive(Clone, Debug)]
pub struct PlantedMdpParams {
    pub states: usize,
    pub blocks: usize,
    pub actions: usize,
    /// Probabilities are multiples of `1 / quantum`.
    pub quantum: usize,
    /// Adds an absorbing terminal state reachable from some blocks.
    pub with_terminal: bool,
}

/// A tabular MDP built by expanding a random block-level MDP into ground states.
#[derive(Clone, Debug)]
pub struct PlantedMdp {
    pub mdp: TabularMdp,
    /// Planted block of each ground state (the terminal state, if any, gets `blocks`).
    pub planted: Vec<usize>,
    /// `counts[a][s][s']`: transition probability times `quantum`.
    pub counts: Vec<Vec<Vec<usize>>>,
    pub quantum: usize,
}

/// Generates a tabular MDP with planted block structure.
///
/// Every ground state in a block shares the block's one-step rewards and its
/// block-level transition distribution, while the mass is spread over
/// different ground states of the target blocks. The planted partition is
/// therefore reward-predictive, though not necessarily maximally compressed.
pub fn random_planted_mdp<R: Rng>(rng: &mut R, params: &PlantedMdpParams) -> Result<PlantedMdp> {
    let PlantedMdpParams {
        states,
        blocks,
        actions,
        quantum,
        with_terminal,
    } = *params;
    if blocks == 0 || blocks > states || actions == 0 || quantum == 0 {
        return Err(Error::InvalidArgument(format!("bad planted MDP parameters {params:?}")));
    }
    let mut planted: Vec<usize> = (0..states).map(|s| if s < blocks { s } else { rng.gen_range(0..blocks) }).collect();
    planted.shuffle(rng);
    let members: Vec<Vec<usize>> = (0..blocks)
        .map(|b| (0..states).filter(|&s| planted[s] == b).collect())
        .collect();
    let n = states + usize::from(with_terminal);
    let target_blocks = blocks + usize::from(with_terminal);
    let mut counts = vec![vec![vec![0usize; n]; n]; actions];
    let mut rewards = vec![vec![0.0; n]; actions];
    for b in 0..blocks {
        for a in 0..actions {
            let reward = if rng.gen_bool(0.3) { 1.0 } else { 0.0 };
            // Block-level distribution: quantum units spread over at most two target blocks.
            let mut block_counts = vec![0usize; target_blocks];
            let first = rng.gen_range(0..target_blocks);
            if rng.gen_bool(0.5) || quantum == 1 {
                block_counts[first] = quantum;
            } else {
                let second = rng.gen_range(0..target_blocks);
                let split = rng.gen_range(1..quantum);
                block_counts[first] += split;
                block_counts[second] += quantum - split;
            }
            for &s in &members[b] {
                rewards[a][s] = reward;
                for (tb, &units) in block_counts.iter().enumerate() {
                    for _ in 0..units {
                        let target = if tb == blocks {
                            states
                        } else {
                            *members[tb].choose(rng).expect("blocks are non-empty")
                        };
                        counts[a][s][target] += 1;
                    }
                }
            }
        }
    }
    if with_terminal {
        for counts_a in counts.iter_mut() {
            counts_a[states][states] = quantum;
        }
        planted.push(blocks);
    }
    let transitions = counts
        .iter()
        .map(|c| DMatrix::from_fn(n, n, |i, j| c[i][j] as f64 / quantum as f64))
        .collect();
    let terminal = (0..n).map(|s| with_terminal && s == states).collect();
    let mdp = TabularMdp::new(transitions, rewards, terminal)?;
    Ok(PlantedMdp {
        mdp,
        planted,
        counts,
        quantum,
    })
}

impl PlantedMdp {
    /// A dataset of one-step trajectories containing every `(s, a, s')` with
    /// multiplicity proportional to its probability, so empirical frequencies
    /// equal the true transition probabilities exactly.
    pub fn exhaustive_dataset(&self) -> Result<TrajectoryDataset> {
        let n = self.mdp.state_count();
        let mut trajectories = Vec::new();
        for s in 0..n {
            if self.mdp.is_terminal_state(s) {
                continue;
            }
            for (a, counts_a) in self.counts.iter().enumerate() {
                for (t, &c) in counts_a[s].iter().enumerate() {
                    for _ in 0..c {
                        trajectories.push(vec![Transition {
                            state: Observation::Discrete(s),
                            action: ActionId(a),
                            reward: self.mdp.reward(s, ActionId(a)),
                            next_state: Observation::Discrete(t),
                            next_is_terminal: self.mdp.is_terminal_state(t),
                        }]);
                    }
                }
            }
        }
        TrajectoryDataset::from_trajectories(self.counts.len(), trajectories)
    }
}
