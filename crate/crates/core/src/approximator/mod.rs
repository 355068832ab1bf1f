//! State-action classifiers: exact frequency tables, nearest neighbours and
//! a fully connected network trained with cross-entropy.

mod knn;
pub mod mlp;
mod tabular;

use std::collections::HashMap;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionId, ObsKey, ObsKind, Observation};

pub use knn::KnnModel;
pub use mlp::{Mlp, MlpConfig};
pub use tabular::TabularModel;

const BLOB_FORMAT: &str = "reward-predictive/classifier";
const BLOB_VERSION: u32 = 1;

/// One labelled training row.
#[derive(Clone, Debug, PartialEq)]
pub struct SaRow {
    pub state: Observation,
    pub action: ActionId,
    pub label: usize,
    pub ignored: bool,
}

/// Rows of `(state, action, class)`; ignored rows never reach a fit.
#[derive(Clone, Debug)]
pub struct LabeledSaDataset {
    class_count: usize,
    action_count: usize,
    rows: Vec<SaRow>,
}

impl LabeledSaDataset {
    pub fn new(class_count: usize, action_count: usize) -> Result<Self> {
        if class_count == 0 || action_count == 0 {
            return Err(Error::InvalidArgument(
                "class_count and action_count must be >= 1".into(),
            ));
        }
        Ok(LabeledSaDataset {
            class_count,
            action_count,
            rows: Vec::new(),
        })
    }

    pub fn push(&mut self, state: Observation, action: ActionId, label: usize, ignored: bool) -> Result<()> {
        if label >= self.class_count {
            return Err(Error::InvalidArgument(format!(
                "label {label} is not below class_count {}",
                self.class_count
            )));
        }
        if action.0 >= self.action_count {
            return Err(Error::InvalidArgument(format!("action {action} out of range")));
        }
        if let Some(first) = self.rows.first() {
            if first.state.kind() != state.kind() {
                return Err(Error::ObservationMismatch {
                    expected: first.state.kind(),
                    found: state.kind(),
                });
            }
        }
        self.rows.push(SaRow {
            state,
            action,
            label,
            ignored,
        });
        Ok(())
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn rows(&self) -> &[SaRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn active_rows(&self) -> impl Iterator<Item = &SaRow> + '_ {
        self.rows.iter().filter(|r| !r.ignored)
    }

    fn kind(&self) -> Option<ObsKind> {
        self.rows.first().map(|r| r.state.kind())
    }

    /// Checks the fit preconditions and returns the observation kind.
    fn validate(&self) -> Result<ObsKind> {
        let mut active = vec![0usize; self.class_count];
        let mut present = vec![false; self.class_count];
        for r in &self.rows {
            present[r.label] = true;
            if !r.ignored {
                active[r.label] += 1;
            }
        }
        if active.iter().all(|&n| n == 0) {
            return Err(Error::Fit("no unmasked training rows".into()));
        }
        if let Some(k) = (0..self.class_count).find(|&k| present[k] && active[k] == 0) {
            return Err(Error::Fit(format!("class {k} has no unmasked rows")));
        }
        Ok(self.kind().expect("non-empty"))
    }
}

/// Hyperparameters of a classifier fit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FitConfig {
    Tabular,
    Knn { k: usize },
    Mlp(MlpConfig),
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        match self {
            FitConfig::Tabular => Ok(()),
            FitConfig::Knn { k } if *k == 0 => Err(Error::spec("k", "must be >= 1")),
            FitConfig::Knn { .. } => Ok(()),
            FitConfig::Mlp(c) => c.validate(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            FitConfig::Tabular => "tabular",
            FitConfig::Knn { .. } => "knn",
            FitConfig::Mlp(_) => "mlp",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
enum Model {
    Tabular(TabularModel),
    Knn(KnnModel),
    Mlp(Mlp),
}

/// A fitted map from `(observation, action)` to a distribution over classes.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Classifier {
    class_count: usize,
    action_count: usize,
    kind: ObsKind,
    model: Model,
}

#[derive(Serialize, Deserialize)]
struct Blob {
    format: String,
    version: u32,
    classifier: Classifier,
}

pub fn fit_classifier(data: &LabeledSaDataset, cfg: &FitConfig) -> Result<Classifier> {
    fit_classifier_warm(data, cfg, None)
}

/// Fits a classifier; an MLP reuses the hidden layers of `previous` when the
/// shapes agree and always starts from a fresh output layer.
pub fn fit_classifier_warm(
    data: &LabeledSaDataset,
    cfg: &FitConfig,
    previous: Option<&Classifier>,
) -> Result<Classifier> {
    cfg.validate()?;
    let kind = data.validate()?;
    let model = match cfg {
        FitConfig::Tabular => Model::Tabular(TabularModel::fit(data)),
        FitConfig::Knn { k } => {
            let ObsKind::Vector(_) = kind else {
                return Err(Error::Unsupported(
                    "knn needs vector observations; use the tabular model for discrete ones".into(),
                ));
            };
            Model::Knn(KnnModel::fit(data, *k))
        }
        FitConfig::Mlp(c) => {
            let ObsKind::Vector(dim) = kind else {
                return Err(Error::Unsupported("mlp needs vector observations".into()));
            };
            let warm = previous.and_then(|p| match &p.model {
                Model::Mlp(m) => Some(m),
                _ => None,
            });
            Model::Mlp(Mlp::fit(data, dim, c, warm)?)
        }
    };
    Ok(Classifier {
        class_count: data.class_count,
        action_count: data.action_count,
        kind,
        model,
    })
}

impl Classifier {
    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn action_count(&self) -> usize {
        self.action_count
    }

    pub fn observation_kind(&self) -> ObsKind {
        self.kind
    }

    pub fn kind_name(&self) -> &'static str {
        match self.model {
            Model::Tabular(_) => "tabular",
            Model::Knn(_) => "knn",
            Model::Mlp(_) => "mlp",
        }
    }

    fn check(&self, s: &Observation, a: ActionId) -> Result<()> {
        if s.kind() != self.kind {
            return Err(Error::ObservationMismatch {
                expected: self.kind,
                found: s.kind(),
            });
        }
        if a.0 >= self.action_count {
            return Err(Error::InvalidArgument(format!(
                "action {a} out of range for {} actions",
                self.action_count
            )));
        }
        Ok(())
    }

    pub fn predict_distribution(&self, s: &Observation, a: ActionId) -> Result<Vec<f64>> {
        self.check(s, a)?;
        Ok(match &self.model {
            Model::Tabular(m) => m.predict(s, a, self.class_count),
            Model::Knn(m) => m.predict(s, a, self.class_count),
            Model::Mlp(m) => m.predict(s.as_vector().expect("checked"), a, self.action_count),
        })
    }

    /// Argmax of [`Classifier::predict_distribution`], ties to the lowest class.
    pub fn predict_class(&self, s: &Observation, a: ActionId) -> Result<usize> {
        Ok(argmax(&self.predict_distribution(s, a)?))
    }

    /// Predicts many queries in parallel; output order matches input order.
    pub fn predict_batch(&self, queries: &[(&Observation, ActionId)]) -> Result<Vec<Vec<f64>>> {
        for (s, a) in queries {
            self.check(s, *a)?;
        }
        if let Model::Mlp(m) = &self.model {
            return Ok(m.predict_many(queries, self.action_count));
        }
        Ok(queries
            .par_iter()
            .map(|(s, a)| match &self.model {
                Model::Tabular(m) => m.predict(s, *a, self.class_count),
                Model::Knn(m) => m.predict(s, *a, self.class_count),
                Model::Mlp(_) => unreachable!(),
            })
            .collect())
    }

    /// Largest gap, over distinct `(state, action)` pairs of the unmasked
    /// rows, between the predicted and the empirical label distribution after
    /// mapping both through `embed` (one column per class).
    pub fn max_residual(&self, data: &LabeledSaDataset, embed: &DMatrix<f64>) -> Result<f64> {
        if embed.ncols() != self.class_count {
            return Err(Error::Dimension {
                expected: self.class_count,
                found: embed.ncols(),
            });
        }
        let mut groups: HashMap<(ObsKey, ActionId), (usize, Vec<f64>)> = HashMap::new();
        let mut order = Vec::new();
        for (i, r) in data.rows.iter().enumerate().filter(|(_, r)| !r.ignored) {
            let entry = groups.entry((r.state.key(), r.action)).or_insert_with(|| {
                order.push(i);
                (i, vec![0.0; self.class_count])
            });
            entry.1[r.label] += 1.0;
        }
        let queries: Vec<(&Observation, ActionId)> = order
            .iter()
            .map(|&i| (&data.rows[i].state, data.rows[i].action))
            .collect();
        let predicted = self.predict_batch(&queries)?;
        let mut worst = 0.0f64;
        for (q, p) in queries.iter().zip(&predicted) {
            let counts = &groups[&(q.0.key(), q.1)].1;
            let total: f64 = counts.iter().sum();
            let diff = nalgebra::DVector::from_iterator(
                self.class_count,
                p.iter().zip(counts).map(|(p, c)| p - c / total),
            );
            worst = worst.max((embed * diff).norm());
        }
        Ok(worst)
    }

    /// Serializes into a versioned JSON document.
    pub fn to_blob(&self) -> Result<String> {
        Ok(serde_json::to_string(&Blob {
            format: BLOB_FORMAT.to_string(),
            version: BLOB_VERSION,
            classifier: self.clone(),
        })?)
    }

    pub fn from_blob(blob: &str) -> Result<Self> {
        let b: Blob = serde_json::from_str(blob)?;
        if b.format != BLOB_FORMAT || b.version != BLOB_VERSION {
            return Err(Error::Unsupported(format!(
                "classifier blob {} v{} (expected {BLOB_FORMAT} v{BLOB_VERSION})",
                b.format, b.version
            )));
        }
        let mut c = b.classifier;
        if let Model::Tabular(m) = &mut c.model {
            m.reindex();
        }
        Ok(c)
    }
}

pub(crate) fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in p.iter().enumerate() {
        if *v > p[best] {
            best = i;
        }
    }
    best
}

fn uniform(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}
