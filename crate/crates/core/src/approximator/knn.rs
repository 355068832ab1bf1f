use std::sync::OnceLock;

use kdtree::distance::squared_euclidean;
use kdtree::KdTree;
use serde::{Deserialize, Serialize};

use super::{uniform, LabeledSaDataset};
use crate::mdp::{ActionId, Observation};

/// Training points of one action, stored row-major.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
struct ActionPoints {
    points: Vec<f64>,
    labels: Vec<usize>,
    /// Built on first query; holds row indices.
    #[serde(skip)]
    tree: OnceLock<KdTree<f64, usize, Vec<f64>>>,
}

impl ActionPoints {
    fn tree(&self, dim: usize) -> &KdTree<f64, usize, Vec<f64>> {
        self.tree.get_or_init(|| {
            let mut tree = KdTree::with_capacity(dim, 32);
            for (row, p) in self.points.chunks_exact(dim).enumerate() {
                tree.add(p.to_vec(), row).expect("finite training points");
            }
            tree
        })
    }
}

/// k-nearest-neighbour vote restricted to rows with the queried action.
///
/// Distances are Euclidean; among equidistant rows the earliest wins.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KnnModel {
    k: usize,
    dim: usize,
    per_action: Vec<ActionPoints>,
}

impl KnnModel {
    pub(super) fn fit(data: &LabeledSaDataset, k: usize) -> Self {
        let mut per_action = vec![ActionPoints::default(); data.action_count()];
        let mut dim = 0;
        for r in data.active_rows() {
            let v = r.state.as_vector().expect("validated vector rows");
            dim = v.len();
            let slot = &mut per_action[r.action.0];
            slot.points.extend_from_slice(v);
            slot.labels.push(r.label);
        }
        KnnModel { k, dim, per_action }
    }

    pub(super) fn predict(&self, s: &Observation, a: ActionId, classes: usize) -> Vec<f64> {
        let q = s.as_vector().expect("checked by caller");
        let slot = &self.per_action[a.0];
        if slot.labels.is_empty() {
            return uniform(classes);
        }
        let k = self.k.min(slot.labels.len());
        let best = nearest_rows(slot.tree(self.dim), q, k);
        let mut votes = vec![0.0; classes];
        for row in &best {
            votes[slot.labels[*row]] += 1.0;
        }
        votes.iter_mut().for_each(|v| *v /= k as f64);
        votes
    }
}

/// The `k` rows closest to `q`, ties broken by lower row index.
fn nearest_rows(tree: &KdTree<f64, usize, Vec<f64>>, q: &[f64], k: usize) -> Vec<usize> {
    let kth = tree
        .nearest(q, k, &squared_euclidean)
        .expect("query dimension checked by caller")
        .last()
        .map_or(0.0, |(d, _)| *d);
    // Everything at the k-th distance competes for the last places.
    let mut within: Vec<(f64, usize)> = tree
        .within(q, kth, &squared_euclidean)
        .expect("query dimension checked by caller")
        .into_iter()
        .map(|(d, row)| (d, *row))
        .collect();
    within.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    within.into_iter().take(k).map(|(_, row)| row).collect()
}
