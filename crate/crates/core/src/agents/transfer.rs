use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{run_agent, AgentConfig, AgentKind, LearningCurve, CURVE_HEADER};
use crate::error::{Error, Result};
use crate::mdp::{make_env, sample_trajectories, EnvSpec, UniformPolicy};
use crate::refine::{refine_to_fixpoint, RefineConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestTask {
    pub name: String,
    pub env: EnvSpec,
}

/// Tasks and data sizes of a transfer experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferSpec {
    /// Task the pretrained-init agent learns first.
    pub train: EnvSpec,
    /// Environment sampled for the refinement dataset; defaults to `train`.
    #[serde(default)]
    pub dataset_env: Option<EnvSpec>,
    pub tests: Vec<TestTask>,
    pub trajectories: usize,
    pub max_len: usize,
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransferRow {
    pub task: String,
    pub agent: AgentKind,
    pub repeat: usize,
    pub curve: LearningCurve,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TransferResult {
    pub rows: Vec<TransferRow>,
    /// Non-terminal partition count of each repeat's representation.
    pub partition_counts: Vec<usize>,
}

impl TransferResult {
    /// Reward per step of every repeat for one (task, agent) cell, in repeat order.
    pub fn scores(&self, task: &str, agent: AgentKind) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.task == task && r.agent == agent)
            .map(|r| r.curve.reward_per_step())
            .collect()
    }

    pub fn write_curves<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(CURVE_HEADER)?;
        for r in &self.rows {
            r.curve.write_rows(&mut w, &r.task, r.agent.name(), r.repeat)?;
        }
        w.flush().map_err(|e| Error::io("<curve writer>", e))?;
        Ok(())
    }

    /// Writes `task,agent,repeat,reward_per_step` rows.
    pub fn write_summary<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["task", "agent", "repeat", "reward_per_step"])?;
        for r in &self.rows {
            w.write_record([
                r.task.clone(),
                r.agent.name().to_string(),
                r.repeat.to_string(),
                format!("{:?}", r.curve.reward_per_step()),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<summary writer>", e))?;
        Ok(())
    }
}

fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(base, |acc, p| {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    })
}

/// Per repeat: refines on a fresh training dataset, pretrains a scratch agent
/// on the training task, then runs all three agents on every test task.
pub fn run_transfer_suite(spec: &TransferSpec, refine: &RefineConfig, agent: &AgentConfig) -> Result<TransferResult> {
    if spec.repeats == 0 {
        return Err(Error::spec("repeats", "must be positive"));
    }
    if spec.tests.is_empty() {
        return Err(Error::spec("tests", "at least one test task is required"));
    }
    refine.validate()?;
    AgentConfig {
        kind: AgentKind::Scratch,
        ..agent.clone()
    }
    .validate()?;
    let train = make_env(&spec.train)?;
    let data_env = make_env(spec.dataset_env.as_ref().unwrap_or(&spec.train))?;
    let tests = spec
        .tests
        .iter()
        .map(|t| make_env(&t.env))
        .collect::<Result<Vec<_>>>()?;
    for (t, env) in spec.tests.iter().zip(&tests) {
        if env.action_count() != train.action_count() {
            return Err(Error::spec("tests", format!("task {} has a different action count", t.name)));
        }
    }

    let per_repeat: Vec<(usize, Vec<TransferRow>)> = (0..spec.repeats)
        .into_par_iter()
        .map(|repeat| {
            let r = repeat as u64;
            let policy = UniformPolicy {
                action_count: data_env.action_count(),
            };
            let data = sample_trajectories(
                data_env.as_ref(),
                &policy,
                spec.trajectories,
                spec.max_len,
                derive_seed(spec.seed, &[r, 0]),
            )?;
            let cfg = RefineConfig {
                seed: derive_seed(spec.seed, &[r, 1]),
                ..refine.clone()
            };
            let outcome = refine_to_fixpoint(&data, &cfg)?;
            let representation = Arc::new(outcome.representation);
            let (_, pretrained) = run_agent(
                train.as_ref(),
                &AgentConfig {
                    kind: AgentKind::Scratch,
                    seed: derive_seed(spec.seed, &[r, 2]),
                    representation: None,
                    pretrained: None,
                    ..agent.clone()
                },
            )?;
            let mut rows = Vec::new();
            for (i, (task, env)) in spec.tests.iter().zip(&tests).enumerate() {
                let seed = derive_seed(spec.seed, &[r, 3, i as u64]);
                for kind in AgentKind::ALL {
                    let cfg = AgentConfig {
                        kind,
                        seed,
                        representation: Some(Arc::clone(&representation)),
                        pretrained: Some(pretrained.clone()),
                        ..agent.clone()
                    };
                    let (curve, _) = run_agent(env.as_ref(), &cfg)?;
                    rows.push(TransferRow {
                        task: task.name.clone(),
                        agent: kind,
                        repeat,
                        curve,
                    });
                }
            }
            Ok((outcome.assignment.non_terminal_count(), rows))
        })
        .collect::<Result<_>>()?;
    let mut result = TransferResult::default();
    for (count, rows) in per_repeat {
        result.partition_counts.push(count);
        result.rows.extend(rows);
    }
    Ok(result)
}
