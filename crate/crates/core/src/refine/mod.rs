//! Iterative partition refinement: reward binning, reward refinement,
//! successor-feature refinement, spurious-partition filtering and the
//! fixpoint loop that returns the final state classifier.

mod cluster;

use std::cmp::Ordering;
use std::io::Write;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::approximator::{fit_classifier, fit_classifier_warm, Classifier, FitConfig, LabeledSaDataset};
use crate::error::{Error, Result};
use crate::lsfm::{sf_from_prediction, ClusterAssignment, Lsfm};
use crate::mdp::{ActionId, Observation, TrajectoryDataset};

pub use cluster::{epsilon_cluster, filter_spurious, initial_clustering, Distance};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub eps_r: f64,
    pub eps_psi: f64,
    pub gamma: f64,
    /// Upper bound on refinement steps, the reward step included.
    pub max_iterations: usize,
    pub spurious_fraction: f64,
    /// 0 keeps one bin per distinct reward value.
    pub reward_bin_width: f64,
    pub reward_model: FitConfig,
    pub sf_model: FitConfig,
    pub representation_model: FitConfig,
    pub seed: u64,
    /// Keep a representation and model for every iteration in the trace.
    pub snapshots: bool,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            eps_r: 0.5,
            eps_psi: 1.0,
            gamma: 0.9,
            max_iterations: 20,
            spurious_fraction: 0.01,
            reward_bin_width: 0.0,
            reward_model: FitConfig::Tabular,
            sf_model: FitConfig::Tabular,
            representation_model: FitConfig::Tabular,
            seed: 0,
            snapshots: false,
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_r > 0.0) {
            return Err(Error::spec("eps_r", "must be > 0"));
        }
        if !(self.eps_psi > 0.0) {
            return Err(Error::spec("eps_psi", "must be > 0"));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::spec("gamma", "must lie in (0, 1)"));
        }
        if self.max_iterations == 0 {
            return Err(Error::spec("max_iterations", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.spurious_fraction) {
            return Err(Error::spec("spurious_fraction", "must lie in [0, 1)"));
        }
        if !(self.reward_bin_width >= 0.0) {
            return Err(Error::spec("reward_bin_width", "must be >= 0"));
        }
        self.reward_model.validate()?;
        self.sf_model.validate()?;
        self.representation_model.validate()?;
        Ok(())
    }

    /// `γ < 1/2` and `(2/3)(1 − γ/(1−γ)) > ε_ψ`.
    pub fn matching_condition_holds(&self) -> bool {
        let g = self.gamma;
        g < 0.5 && (2.0 / 3.0) * (1.0 - g / (1.0 - g)) > self.eps_psi
    }

    fn fit_config(&self, base: &FitConfig, step: u64) -> FitConfig {
        match base {
            FitConfig::Mlp(c) => {
                let mut c = c.clone();
                c.seed = c
                    .seed
                    .wrapping_add(self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15))
                    .wrapping_add(step);
                FitConfig::Mlp(c)
            }
            other => other.clone(),
        }
    }
}

/// Reward value per bin and the rule mapping rewards to bins.
#[derive(Clone, Debug, PartialEq)]
pub struct RewardBins {
    width: f64,
    keys: Vec<i64>,
    pub values: Vec<f64>,
}

impl RewardBins {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Bin of an observed reward.
    pub fn bin(&self, r: f64) -> Option<usize> {
        if self.width == 0.0 {
            self.values.binary_search_by(|v| v.total_cmp(&r)).ok()
        } else {
            self.keys.binary_search(&((r / self.width).floor() as i64)).ok()
        }
    }
}

pub fn bin_rewards(data: &TrajectoryDataset, bin_width: f64) -> RewardBins {
    let mut rewards: Vec<f64> = data.steps().map(|s| s.reward).collect();
    rewards.sort_by(f64::total_cmp);
    rewards.dedup_by(|a, b| a.total_cmp(b) == Ordering::Equal);
    if bin_width == 0.0 {
        return RewardBins {
            width: 0.0,
            keys: Vec::new(),
            values: rewards,
        };
    }
    let mut keys: Vec<i64> = rewards.iter().map(|r| (r / bin_width).floor() as i64).collect();
    keys.dedup();
    let values = keys.iter().map(|k| (*k as f64 + 0.5) * bin_width).collect();
    RewardBins {
        width: bin_width,
        keys,
        values,
    }
}

/// Output of one refinement step.
#[derive(Clone, Debug)]
pub struct StepResult {
    pub assignment: ClusterAssignment,
    pub classifier: Classifier,
    /// Largest ε-perfection residual of the fitted classifier.
    pub max_residual: f64,
}

/// Non-ignored, non-terminal instances: the ones that receive clustering keys.
fn keyed_instances(c: &ClusterAssignment) -> Vec<usize> {
    (0..c.len())
        .filter(|&i| matches!(c.partition(i), Some(p) if Some(p) != c.terminal_partition()))
        .collect()
}

fn queries<'a>(data: &'a TrajectoryDataset, ids: &[usize], actions: usize) -> Vec<(&'a Observation, ActionId)> {
    ids.iter()
        .flat_map(|&i| (0..actions).map(move |a| (data.instance(i), ActionId(a))))
        .collect()
}

/// Splits every partition of `c0` by predicted one-step rewards.
pub fn reward_refine(data: &TrajectoryDataset, c0: &ClusterAssignment, cfg: &RefineConfig) -> Result<StepResult> {
    let bins = bin_rewards(data, cfg.reward_bin_width);
    let actions = data.action_count();
    let mut labeled = LabeledSaDataset::new(bins.len().max(1), actions)?;
    for s in data.steps() {
        let bin = bins.bin(s.reward).expect("every observed reward has a bin");
        labeled.push(data.instance(s.state).clone(), s.action, bin, c0.is_ignored(s.state))?;
    }
    let classifier = fit_classifier(&labeled, &cfg.fit_config(&cfg.reward_model, 1))?;
    let wr = DMatrix::from_row_slice(1, bins.len(), &bins.values);
    let max_residual = classifier.max_residual(&labeled, &wr)?;
    if max_residual > cfg.eps_r / 2.0 {
        log::warn!("reward classifier residual {max_residual:.4} exceeds eps_r/2");
    }
    let ids = keyed_instances(c0);
    let predicted = classifier.predict_batch(&queries(data, &ids, actions))?;
    let mut keys: Vec<Option<Vec<f64>>> = vec![None; data.instance_count()];
    for (k, &i) in ids.iter().enumerate() {
        keys[i] = Some(
            predicted[k * actions..(k + 1) * actions]
                .iter()
                .map(|p| p.iter().zip(&bins.values).map(|(p, v)| p * v).sum())
                .collect(),
        );
    }
    let assignment = epsilon_cluster(&keys, actions, cfg.eps_r, Distance::L1, c0)?;
    Ok(StepResult {
        assignment,
        classifier,
        max_residual,
    })
}

/// Splits every partition of `ci` by predicted successor features.
pub fn sf_refine(
    data: &TrajectoryDataset,
    ci: &ClusterAssignment,
    cfg: &RefineConfig,
    previous: Option<&Classifier>,
    step: u64,
) -> Result<StepResult> {
    let lsfm = Lsfm::build(data, ci, cfg.gamma)?;
    let n = ci.partition_count();
    let actions = data.action_count();
    let mut labeled = LabeledSaDataset::new(n, actions)?;
    for s in data.steps() {
        if let (Some(_), Some(next)) = (ci.partition(s.state), ci.partition(s.next_state)) {
            labeled.push(data.instance(s.state).clone(), s.action, next, false)?;
        }
    }
    let classifier = fit_classifier_warm(&labeled, &cfg.fit_config(&cfg.sf_model, step), previous)?;
    let embed = lsfm.f.transpose() * cfg.gamma;
    let max_residual = classifier.max_residual(&labeled, &embed)?;
    if max_residual > cfg.eps_psi / 2.0 {
        log::warn!("SF classifier residual {max_residual:.4} exceeds eps_psi/2");
    }
    let ids = keyed_instances(ci);
    let predicted = classifier.predict_batch(&queries(data, &ids, actions))?;
    let mut keys: Vec<Option<Vec<f64>>> = vec![None; data.instance_count()];
    for (k, &i) in ids.iter().enumerate() {
        let current = ci.partition(i).expect("keyed instances are assigned");
        let mut key = Vec::with_capacity(actions * n);
        for p in &predicted[k * actions..(k + 1) * actions] {
            key.extend(sf_from_prediction(current, p, &lsfm.f, cfg.gamma)?.iter());
        }
        keys[i] = Some(key);
    }
    let clustered = epsilon_cluster(&keys, actions, cfg.eps_psi, Distance::L2, ci)?;
    Ok(StepResult {
        assignment: filter_spurious(&clustered, cfg.spurious_fraction)?,
        classifier,
        max_residual,
    })
}

/// A representation and latent model captured at one iteration.
#[derive(Clone, Debug)]
pub struct Snapshot {
    pub representation: Classifier,
    pub lsfm: Lsfm,
}

#[derive(Clone, Debug)]
pub struct TraceEntry {
    /// 0 is the initial clustering, 1 the reward step, later ones SF steps.
    pub iteration: usize,
    pub assignment: ClusterAssignment,
    pub partition_count: usize,
    pub ignored_count: usize,
    pub max_residual: f64,
    pub model_kind: &'static str,
    pub wall_time_ms: f64,
    pub snapshot: Option<Snapshot>,
}

/// Every clustering produced by a refinement run, in order.
#[derive(Clone, Debug, Default)]
pub struct RefinementTrace {
    pub entries: Vec<TraceEntry>,
}

impl RefinementTrace {
    /// Refinement steps performed, the reward step included.
    pub fn iterations(&self) -> usize {
        self.entries.len().saturating_sub(1)
    }

    /// Writes `iteration,partition_count,ignored_count,max_residual`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["iteration", "partition_count", "ignored_count", "max_residual"])?;
        for e in &self.entries {
            w.write_record([
                e.iteration.to_string(),
                e.partition_count.to_string(),
                e.ignored_count.to_string(),
                format!("{:?}", e.max_residual),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<trace writer>", e))?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub assignment: ClusterAssignment,
    /// Maps an observation to its partition; action-independent.
    pub representation: Classifier,
    pub lsfm: Lsfm,
    pub trace: RefinementTrace,
    pub converged: bool,
}

/// Fits the state classifier `observation → partition` on the non-ignored instances.
pub fn fit_representation(data: &TrajectoryDataset, c: &ClusterAssignment, cfg: &FitConfig) -> Result<Classifier> {
    let mut labeled = LabeledSaDataset::new(c.partition_count().max(1), 1)?;
    for (i, obs) in data.instances().iter().enumerate() {
        if let Some(p) = c.partition(i) {
            labeled.push(obs.clone(), ActionId(0), p, false)?;
        }
    }
    fit_classifier(&labeled, cfg)
}

pub fn refine_to_fixpoint(data: &TrajectoryDataset, cfg: &RefineConfig) -> Result<RefineOutcome> {
    cfg.validate()?;
    if !cfg.matching_condition_holds() {
        static ONCE: std::sync::Once = std::sync::Once::new();
        // Once per process: transfer suites refine many times with one config.
        ONCE.call_once(|| {
            log::warn!(
                "gamma {} and eps_psi {} violate the separation condition; refinement may over- or under-split",
                cfg.gamma,
                cfg.eps_psi
            )
        });
    }
    let mut trace = RefinementTrace::default();
    let record = |trace: &mut RefinementTrace, c: &ClusterAssignment, residual: f64, kind, started: Instant| -> Result<()> {
        let snapshot = if cfg.snapshots {
            Some(Snapshot {
                representation: fit_representation(data, c, &cfg.fit_config(&cfg.representation_model, 1000))?,
                lsfm: Lsfm::build(data, c, cfg.gamma)?,
            })
        } else {
            None
        };
        let iteration = trace.entries.len();
        log::info!(
            "iteration {iteration}: {} partitions, {} ignored",
            c.partition_count(),
            c.ignored_count()
        );
        trace.entries.push(TraceEntry {
            iteration,
            assignment: c.clone(),
            partition_count: c.partition_count(),
            ignored_count: c.ignored_count(),
            max_residual: residual,
            model_kind: kind,
            wall_time_ms: started.elapsed().as_secs_f64() * 1e3,
            snapshot,
        });
        Ok(())
    };

    let started = Instant::now();
    let c0 = initial_clustering(data);
    record(&mut trace, &c0, 0.0, "none", started)?;

    let started = Instant::now();
    let reward = reward_refine(data, &c0, cfg)?;
    let mut current = reward.assignment;
    record(&mut trace, &current, reward.max_residual, cfg.reward_model.name(), started)?;

    let mut converged = false;
    let mut previous: Option<Classifier> = None;
    for step in 2..=cfg.max_iterations {
        let started = Instant::now();
        let out = sf_refine(data, &current, cfg, previous.as_ref(), step as u64)?;
        record(&mut trace, &out.assignment, out.max_residual, cfg.sf_model.name(), started)?;
        let done = out.assignment.same_partition(&current);
        current = out.assignment;
        previous = Some(out.classifier);
        if done {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("no fixpoint within {} iterations", cfg.max_iterations);
    }
    let representation = fit_representation(data, &current, &cfg.fit_config(&cfg.representation_model, 1000))?;
    let lsfm = Lsfm::build(data, &current, cfg.gamma)?;
    Ok(RefineOutcome {
        assignment: current,
        representation,
        lsfm,
        trace,
        converged,
    })
}
