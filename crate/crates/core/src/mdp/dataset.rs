use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionId, ObsKey, ObsKind, Observation};

/// One `(s, a, r, s')` sample with a terminal flag on the successor.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Observation,
    pub action: ActionId,
    pub reward: f64,
    pub next_state: Observation,
    pub next_is_terminal: bool,
}

/// A transition with both observations replaced by dataset-wide instance ids.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub action: ActionId,
    pub reward: f64,
    pub next_state: usize,
    pub next_is_terminal: bool,
}

/// A fixed offline set of trajectories.
///
/// Every distinct observation ("state instance") gets exactly one integer id,
/// assigned in order of first appearance. Clustering operates on these ids.
#[derive(Clone, Debug)]
pub struct TrajectoryDataset {
    action_count: usize,
    kind: ObsKind,
    instances: Vec<Observation>,
    index: HashMap<ObsKey, usize>,
    terminal: Vec<bool>,
    trajectories: Vec<Vec<Step>>,
}

impl TrajectoryDataset {
    /// Builds a dataset, checking the chaining and terminal invariants.
    pub fn from_trajectories(
        action_count: usize,
        trajectories: impl IntoIterator<Item = Vec<Transition>>,
    ) -> Result<Self> {
        if action_count == 0 {
            return Err(Error::InvalidArgument("action_count must be >= 1".into()));
        }
        let mut ds = TrajectoryDataset {
            action_count,
            kind: ObsKind::Discrete,
            instances: Vec::new(),
            index: HashMap::new(),
            terminal: Vec::new(),
            trajectories: Vec::new(),
        };
        let mut kind: Option<ObsKind> = None;
        for (t, traj) in trajectories.into_iter().enumerate() {
            if traj.is_empty() {
                return Err(Error::Dataset(format!("trajectory {t} is empty")));
            }
            let mut steps = Vec::with_capacity(traj.len());
            for (k, tr) in traj.iter().enumerate() {
                for obs in [&tr.state, &tr.next_state] {
                    match kind {
                        None => kind = Some(obs.kind()),
                        Some(expected) if expected != obs.kind() => {
                            return Err(Error::Dataset(format!(
                                "trajectory {t} step {k}: observation kind {} differs from {}",
                                obs.kind(),
                                expected
                            )))
                        }
                        _ => {}
                    }
                }
                if tr.action.0 >= action_count {
                    return Err(Error::Dataset(format!(
                        "trajectory {t} step {k}: action {} out of range",
                        tr.action
                    )));
                }
                if !tr.reward.is_finite() {
                    return Err(Error::Dataset(format!(
                        "trajectory {t} step {k}: non-finite reward"
                    )));
                }
                if tr.next_is_terminal && k + 1 != traj.len() {
                    return Err(Error::Dataset(format!(
                        "trajectory {t} step {k}: terminal flag before the final step"
                    )));
                }
                if k > 0 && traj[k - 1].next_state.key() != tr.state.key() {
                    return Err(Error::Dataset(format!(
                        "trajectory {t} step {k}: state does not chain from previous next_state"
                    )));
                }
                let state = ds.intern(&tr.state);
                let next_state = ds.intern(&tr.next_state);
                if tr.next_is_terminal {
                    ds.terminal[next_state] = true;
                }
                steps.push(Step {
                    state,
                    action: tr.action,
                    reward: tr.reward,
                    next_state,
                    next_is_terminal: tr.next_is_terminal,
                });
            }
            ds.trajectories.push(steps);
        }
        if ds.trajectories.is_empty() {
            return Err(Error::Dataset("dataset has no trajectories".into()));
        }
        ds.kind = kind.unwrap_or(ObsKind::Discrete);
        Ok(ds)
    }

    fn intern(&mut self, obs: &Observation) -> usize {
        let key = obs.key();
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.instances.len();
        self.instances.push(obs.clone());
        self.index.insert(key, id);
        self.terminal.push(false);
        id
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn observation_kind(&self) -> ObsKind {
        self.kind
    }

    pub fn instance_count(&self) -> usize {
        self.instances.len()
    }

    pub fn instance(&self, id: usize) -> &Observation {
        &self.instances[id]
    }

    pub fn instances(&self) -> &[Observation] {
        &self.instances
    }

    /// Id of an observation if it occurs in the dataset.
    pub fn instance_id(&self, obs: &Observation) -> Option<usize> {
        self.index.get(&obs.key()).copied()
    }

    /// True if the instance was reached by a terminal transition.
    pub fn is_terminal(&self, id: usize) -> bool {
        self.terminal[id]
    }

    pub fn trajectories(&self) -> &[Vec<Step>] {
        &self.trajectories
    }

    pub fn trajectory_count(&self) -> usize {
        self.trajectories.len()
    }

    /// All steps of all trajectories, in order.
    pub fn steps(&self) -> impl Iterator<Item = &Step> + '_ {
        self.trajectories.iter().flatten()
    }

    pub fn transition_count(&self) -> usize {
        self.trajectories.iter().map(Vec::len).sum()
    }

    /// Materializes trajectory `t` with full observations.
    pub fn transitions(&self, t: usize) -> Vec<Transition> {
        self.trajectories[t]
            .iter()
            .map(|s| Transition {
                state: self.instances[s.state].clone(),
                action: s.action,
                reward: s.reward,
                next_state: self.instances[s.next_state].clone(),
                next_is_terminal: s.next_is_terminal,
            })
            .collect()
    }

    /// Writes the dataset as CSV with columns
    /// `trajectory_id,step,state_repr,action,reward,next_state_repr,terminal`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "trajectory_id",
            "step",
            "state_repr",
            "action",
            "reward",
            "next_state_repr",
            "terminal",
        ])?;
        for (t, traj) in self.trajectories.iter().enumerate() {
            for (k, s) in traj.iter().enumerate() {
                w.write_record([
                    t.to_string(),
                    k.to_string(),
                    self.instances[s.state].to_repr(),
                    s.action.0.to_string(),
                    format!("{:?}", s.reward),
                    self.instances[s.next_state].to_repr(),
                    u8::from(s.next_is_terminal).to_string(),
                ])?;
            }
        }
        w.flush().map_err(|e| Error::io("<dataset writer>", e))?;
        Ok(())
    }

    /// Reads a dataset CSV written by [`TrajectoryDataset::write_csv`].
    ///
    /// Rows must be grouped by trajectory and ordered by step.
    pub fn read_csv<R: Read>(reader: R, action_count: usize) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut trajectories: Vec<Vec<Transition>> = Vec::new();
        let mut current: Option<u64> = None;
        for (line, record) in r.records().enumerate() {
            let record = record?;
            if record.len() != 7 {
                return Err(Error::Dataset(format!(
                    "row {}: expected 7 columns, found {}",
                    line + 1,
                    record.len()
                )));
            }
            let field = |i: usize| record.get(i).unwrap_or("").trim();
            let bad = |what: &str| Error::Dataset(format!("row {}: bad {what}", line + 1));
            let tid: u64 = field(0).parse().map_err(|_| bad("trajectory_id"))?;
            let step: usize = field(1).parse().map_err(|_| bad("step"))?;
            let state: Observation = field(2).parse()?;
            let action: usize = field(3).parse().map_err(|_| bad("action"))?;
            let reward: f64 = field(4).parse().map_err(|_| bad("reward"))?;
            let next_state: Observation = field(5).parse()?;
            let terminal = match field(6) {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(bad("terminal")),
            };
            if current != Some(tid) {
                current = Some(tid);
                trajectories.push(Vec::new());
            }
            let traj = trajectories.last_mut().expect("pushed above");
            if step != traj.len() {
                return Err(Error::Dataset(format!(
                    "row {}: trajectory {tid} step {step} out of order",
                    line + 1
                )));
            }
            traj.push(Transition {
                state,
                action: ActionId(action),
                reward,
                next_state,
                next_is_terminal: terminal,
            });
        }
        Self::from_trajectories(action_count, trajectories)
    }
}
