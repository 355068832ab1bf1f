use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{uniform, LabeledSaDataset};
use crate::mdp::{ActionId, ObsKey, Observation};

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Entry {
    key: ObsKey,
    action: ActionId,
    distribution: Vec<f64>,
}

/// Empirical label frequencies per exact `(observation, action)` pair.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularModel {
    entries: Vec<Entry>,
    #[serde(skip)]
    index: HashMap<(ObsKey, ActionId), usize>,
}

impl TabularModel {
    pub(super) fn fit(data: &LabeledSaDataset) -> Self {
        let mut model = TabularModel {
            entries: Vec::new(),
            index: HashMap::new(),
        };
        for r in data.active_rows() {
            let key = (r.state.key(), r.action);
            let slot = match model.index.get(&key) {
                Some(&i) => i,
                None => {
                    model.entries.push(Entry {
                        key: key.0.clone(),
                        action: r.action,
                        distribution: vec![0.0; data.class_count()],
                    });
                    model.index.insert(key, model.entries.len() - 1);
                    model.entries.len() - 1
                }
            };
            model.entries[slot].distribution[r.label] += 1.0;
        }
        for e in &mut model.entries {
            let total: f64 = e.distribution.iter().sum();
            e.distribution.iter_mut().for_each(|p| *p /= total);
        }
        model
    }

    pub(super) fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.key.clone(), e.action), i))
            .collect();
    }

    /// Unseen pairs get the uniform distribution.
    pub(super) fn predict(&self, s: &Observation, a: ActionId, classes: usize) -> Vec<f64> {
        match self.index.get(&(s.key(), a)) {
            Some(&i) => self.entries[i].distribution.clone(),
            None => uniform(classes),
        }
    }
}
