//! Reward-sequence metrics, confusion matrices and exact oracles for tabular MDPs.

mod oracle;

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::approximator::{fit_classifier, Classifier, FitConfig, LabeledSaDataset};
use crate::error::{Error, Result};
use crate::lsfm::{ClusterAssignment, Lsfm};
use crate::mdp::{ActionId, Environment, Observation, TabularMdp, TrajectoryDataset};
use crate::refine::RefineOutcome;

pub use oracle::{check_sub_clustering, exact_sf, oracle_partition, projection_matrix, OracleTolerance, SubClustering};

/// A state classifier plus the latent reward and transition model over its partitions.
#[derive(Clone, Debug)]
pub struct LatentModel {
    representation: Classifier,
    lsfm: Lsfm,
    terminal_partition: Option<usize>,
}

impl LatentModel {
    pub fn new(representation: Classifier, lsfm: Lsfm, terminal_partition: Option<usize>) -> Result<Self> {
        let n = lsfm.partition_count();
        if representation.class_count() != n {
            return Err(Error::Dimension {
                expected: n,
                found: representation.class_count(),
            });
        }
        if representation.action_count() != 1 {
            return Err(Error::InvalidArgument("representation must be a state classifier".into()));
        }
        if lsfm.w.iter().any(|w| w.len() != n) {
            return Err(Error::Dimension {
                expected: n,
                found: lsfm.w.iter().map(|w| w.len()).find(|&l| l != n).unwrap_or(0),
            });
        }
        for m in &lsfm.m {
            for i in 0..n {
                if (m.row(i).sum() - 1.0).abs() > 1e-9 {
                    return Err(Error::Numeric(format!("latent transition row {i} is not stochastic")));
                }
            }
        }
        if terminal_partition.is_some_and(|t| t >= n) {
            return Err(Error::InvalidArgument("terminal partition out of range".into()));
        }
        Ok(LatentModel {
            representation,
            lsfm,
            terminal_partition,
        })
    }

    pub fn from_outcome(outcome: &RefineOutcome) -> Result<Self> {
        Self::new(
            outcome.representation.clone(),
            outcome.lsfm.clone(),
            outcome.assignment.terminal_partition(),
        )
    }

    pub fn representation(&self) -> &Classifier {
        &self.representation
    }

    pub fn lsfm(&self) -> &Lsfm {
        &self.lsfm
    }

    pub fn terminal_partition(&self) -> Option<usize> {
        self.terminal_partition
    }

    pub fn partition_count(&self) -> usize {
        self.lsfm.partition_count()
    }

    pub fn action_count(&self) -> usize {
        self.lsfm.action_count()
    }

    pub fn classify(&self, s: &Observation) -> Result<usize> {
        self.representation.predict_class(s, ActionId(0))
    }

    /// Writes `representation.json`, `model.txt` and the latent model under `lsfm/`.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join("representation.json");
        fs::write(&path, self.representation.to_blob()?).map_err(|e| Error::io(&path, e))?;
        let path = dir.join("model.txt");
        let terminal = self.terminal_partition.map_or(String::new(), |t| t.to_string());
        fs::write(&path, format!("terminal_partition={terminal}\n")).map_err(|e| Error::io(&path, e))?;
        self.lsfm.write_bundle(&dir.join("lsfm"))
    }

    pub fn read_bundle(dir: &Path) -> Result<Self> {
        let path = dir.join("representation.json");
        let blob = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let representation = Classifier::from_blob(&blob)?;
        let path = dir.join("model.txt");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let value = text
            .lines()
            .find_map(|l| l.strip_prefix("terminal_partition="))
            .ok_or_else(|| Error::Config(format!("{} lacks terminal_partition", path.display())))?
            .trim();
        let terminal_partition = if value.is_empty() {
            None
        } else {
            Some(
                value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad terminal_partition `{value}`")))?,
            )
        };
        Self::new(representation, Lsfm::read_bundle(&dir.join("lsfm"))?, terminal_partition)
    }
}

/// Expected rewards along `actions` from the latent state of `s0`.
///
/// The latent state distribution starts one-hot and evolves as `d ← M_aᵀ d`.
pub fn predict_reward_sequence(m: &LatentModel, s0: &Observation, actions: &[ActionId]) -> Result<Vec<f64>> {
    let start = m.classify(s0)?;
    predict_from_partition(m, start, actions)
}

pub(crate) fn predict_from_partition(m: &LatentModel, start: usize, actions: &[ActionId]) -> Result<Vec<f64>> {
    let n = m.partition_count();
    let mut d = DVector::<f64>::zeros(n);
    d[start] = 1.0;
    let mut out = Vec::with_capacity(actions.len());
    for a in actions {
        if a.0 >= m.action_count() {
            return Err(Error::Dimension {
                expected: m.action_count(),
                found: a.0 + 1,
            });
        }
        out.push(m.lsfm.w[a.0].dot(&d));
        d = m.lsfm.m[a.0].tr_mul(&d);
    }
    Ok(out)
}

/// Mean absolute reward prediction error of every trajectory, using its own actions.
pub fn reward_sequence_error(m: &LatentModel, test: &TrajectoryDataset) -> Result<Vec<f64>> {
    if test.observation_kind() != m.representation.observation_kind() {
        return Err(Error::ObservationMismatch {
            expected: m.representation.observation_kind(),
            found: test.observation_kind(),
        });
    }
    test.trajectories()
        .par_iter()
        .map(|steps| {
            let Some(first) = steps.first() else { return Ok(0.0) };
            let actions: Vec<ActionId> = steps.iter().map(|s| s.action).collect();
            let predicted = predict_reward_sequence(m, test.instance(first.state), &actions)?;
            let total: f64 = predicted.iter().zip(steps).map(|(p, s)| (p - s.reward).abs()).sum();
            Ok(total / steps.len() as f64)
        })
        .collect()
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[mid] } else { (v[mid - 1] + v[mid]) / 2.0 })
}

/// Writes `trajectory_id,mean_abs_error,iteration` rows.
pub fn write_reward_errors<W: Write>(writer: W, runs: &[(usize, Vec<f64>)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["trajectory_id", "mean_abs_error", "iteration"])?;
    for (iteration, errors) in runs {
        for (t, e) in errors.iter().enumerate() {
            w.write_record([t.to_string(), format!("{e:?}"), iteration.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io("<error writer>", e))?;
    Ok(())
}

/// Instance counts per (hidden label, latent partition), plus an ignore column.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub row_names: Vec<String>,
    /// `counts[label][partition]`; the last column counts ignored instances.
    pub counts: Vec<Vec<usize>>,
}

/// Tabulates every instance of `data` by its hidden label and predicted partition.
///
/// Instances ignored in `ignored` go to the ignore column instead of being
/// classified; pass `None` to classify everything.
pub fn confusion_matrix(
    data: &TrajectoryDataset,
    m: &LatentModel,
    env: &dyn Environment,
    ignored: Option<&ClusterAssignment>,
) -> Result<ConfusionMatrix> {
    if let Some(c) = ignored {
        if c.len() != data.instance_count() {
            return Err(Error::Domain(format!(
                "assignment covers {} instances, dataset has {}",
                c.len(),
                data.instance_count()
            )));
        }
    }
    let labels = env.hidden_state_count();
    let columns = m.partition_count() + 1;
    let cells: Vec<(usize, usize)> = (0..data.instance_count())
        .into_par_iter()
        .map(|i| {
            let obs = data.instance(i);
            let label = env
                .label(obs)
                .filter(|&l| l < labels)
                .ok_or_else(|| Error::Domain(format!("instance {i} has no hidden label")))?;
            let column = if ignored.is_some_and(|c| c.is_ignored(i)) {
                columns - 1
            } else {
                m.classify(obs)?
            };
            Ok((label, column))
        })
        .collect::<Result<_>>()?;
    let mut counts = vec![vec![0; columns]; labels];
    for (l, c) in cells {
        counts[l][c] += 1;
    }
    Ok(ConfusionMatrix {
        row_names: (0..labels).map(|l| env.label_name(l)).collect(),
        counts,
    })
}

impl ConfusionMatrix {
    pub fn partition_count(&self) -> usize {
        self.counts.first().map_or(0, |r| r.len() - 1)
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn ignored(&self) -> usize {
        self.counts.iter().map(|r| r.last().copied().unwrap_or(0)).sum()
    }

    /// Merges rows into `group_count` groups given by `group(label)`.
    pub fn grouped(&self, group_count: usize, group: impl Fn(usize) -> usize, names: Vec<String>) -> Result<Self> {
        if names.len() != group_count {
            return Err(Error::Dimension {
                expected: group_count,
                found: names.len(),
            });
        }
        let mut counts = vec![vec![0; self.partition_count() + 1]; group_count];
        for (l, row) in self.counts.iter().enumerate() {
            let g = group(l);
            if g >= group_count {
                return Err(Error::InvalidArgument(format!("label {l} mapped to group {g}")));
            }
            for (c, v) in row.iter().enumerate() {
                counts[g][c] += v;
            }
        }
        Ok(ConfusionMatrix { row_names: names, counts })
    }

    /// Fraction of instances whose row is the majority row of their partition
    /// column. Ignored instances count against purity.
    pub fn majority_purity(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 1.0;
        }
        let good: usize = (0..self.partition_count())
            .map(|c| self.counts.iter().map(|r| r[c]).max().unwrap_or(0))
            .sum();
        good as f64 / total as f64
    }

    /// Fraction of classified instances lying outside a one-to-one pairing of
    /// rows and columns. Zero iff every row occupies a single column and every
    /// column holds a single row.
    pub fn off_block_mass(&self) -> f64 {
        let p = self.partition_count();
        let classified: usize = self.counts.iter().map(|r| r[..p].iter().sum::<usize>()).sum();
        if classified == 0 {
            return 0.0;
        }
        let column_owner: Vec<Option<usize>> = (0..p)
            .map(|c| (0..self.counts.len()).filter(|&r| self.counts[r][c] > 0).max_by_key(|&r| (self.counts[r][c], std::cmp::Reverse(r))))
            .collect();
        let row_home: Vec<Option<usize>> = self
            .counts
            .iter()
            .map(|r| (0..p).filter(|&c| r[c] > 0).max_by_key(|&c| (r[c], std::cmp::Reverse(c))))
            .collect();
        let on: usize = (0..self.counts.len())
            .flat_map(|r| (0..p).map(move |c| (r, c)))
            .filter(|&(r, c)| column_owner[c] == Some(r) && row_home[r] == Some(c))
            .map(|(r, c)| self.counts[r][c])
            .sum();
        (classified - on) as f64 / classified as f64
    }

    /// Writes a grid with header `label,0,…,k-1,ignored`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let head: Vec<String> = std::iter::once("label".to_string())
            .chain((0..self.partition_count()).map(|c| c.to_string()))
            .chain(std::iter::once("ignored".to_string()))
            .collect();
        w.write_record(&head)?;
        for (name, row) in self.row_names.iter().zip(&self.counts) {
            w.write_record(std::iter::once(name.clone()).chain(row.iter().map(|v| v.to_string())))?;
        }
        w.flush().map_err(|e| Error::io("<confusion writer>", e))?;
        Ok(())
    }
}

/// Expected reward sequence of a tabular MDP from `s` under `actions`.
pub fn exact_reward_sequence(mdp: &TabularMdp, s: usize, actions: &[ActionId]) -> Vec<f64> {
    let n = mdp.state_count();
    let mut d = DVector::<f64>::zeros(n);
    d[s] = 1.0;
    actions
        .iter()
        .map(|a| {
            let r = (0..n).map(|i| d[i] * mdp.reward(i, *a)).sum();
            d = mdp.transition(*a).tr_mul(&d);
            r
        })
        .collect()
}

/// Latent model of a partition of a tabular MDP's states, built from exact
/// probabilities. `c` must be reward- and transition-consistent within blocks;
/// the first member of each block supplies its rows.
pub fn exact_latent_model(mdp: &TabularMdp, c: &ClusterAssignment, gamma: f64) -> Result<LatentModel> {
    let n = c.partition_count();
    if c.len() != mdp.state_count() {
        return Err(Error::Domain(format!("{} labels for {} states", c.len(), mdp.state_count())));
    }
    let members = c.members();
    let action_count = mdp.action_count();
    let mut w = Vec::with_capacity(action_count);
    let mut m = Vec::with_capacity(action_count);
    for a in 0..action_count {
        let a = ActionId(a);
        let mut wa = DVector::zeros(n);
        let mut ma = DMatrix::zeros(n, n);
        for (k, block) in members.iter().enumerate() {
            let Some(&s) = block.first() else {
                ma[(k, k)] = 1.0;
                continue;
            };
            wa[k] = mdp.reward(s, a);
            for t in 0..mdp.state_count() {
                let p = mdp.probability(s, a, t);
                if p > 0.0 {
                    let l = c
                        .partition(t)
                        .ok_or_else(|| Error::Precondition(format!("state {t} is unassigned")))?;
                    ma[(k, l)] += p;
                }
            }
        }
        w.push(wa);
        m.push(ma);
    }
    let lsfm = Lsfm::from_parts(w, m, gamma)?;
    let mut labeled = LabeledSaDataset::new(n, 1)?;
    for s in 0..mdp.state_count() {
        if let Some(p) = c.partition(s) {
            labeled.push(Observation::Discrete(s), ActionId(0), p, false)?;
        }
    }
    let representation = fit_classifier(&labeled, &FitConfig::Tabular)?;
    let terminal = (0..mdp.state_count())
        .find(|&s| mdp.is_terminal_state(s))
        .and_then(|s| c.partition(s));
    LatentModel::new(representation, lsfm, terminal)
}
