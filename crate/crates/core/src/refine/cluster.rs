use crate::error::{Error, Result};
use crate::lsfm::ClusterAssignment;
use crate::mdp::TrajectoryDataset;

/// How per-action key blocks are compared; block distances are summed over actions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    L1,
    L2,
}

fn distance(a: &[f64], b: &[f64], block: usize, kind: Distance) -> f64 {
    match kind {
        Distance::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Distance::L2 => a
            .chunks(block)
            .zip(b.chunks(block))
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
            .sum(),
    }
}

/// Non-terminal instances in partition 0, terminal instances in partition 1.
pub fn initial_clustering(data: &TrajectoryDataset) -> ClusterAssignment {
    let n = data.instance_count();
    let terminals = (0..n).filter(|&i| data.is_terminal(i)).count();
    let labels: Vec<Option<usize>> = if terminals == 0 {
        vec![Some(0); n]
    } else if terminals == n {
        log::warn!("every instance is terminal");
        vec![Some(0); n]
    } else {
        (0..n).map(|i| Some(usize::from(data.is_terminal(i)))).collect()
    };
    let count = if terminals == 0 || terminals == n { 1 } else { 2 };
    let terminal = match terminals {
        0 => None,
        t if t == n => Some(0),
        _ => Some(1),
    };
    ClusterAssignment::new(labels, count, terminal).expect("labels within count")
}

/// Leader clustering inside each partition of `base`.
///
/// Instances are visited in id order. Each joins the first leader of its base
/// partition within `eps`, or becomes a new leader. `keys[i]` holds the
/// concatenated per-action keys of instance `i` (`actions` equal blocks) and
/// must be present for every assigned, non-terminal instance. The terminal
/// partition is kept whole; ignored instances stay ignored. New partitions
/// are numbered by their smallest instance id.
pub fn epsilon_cluster(
    keys: &[Option<Vec<f64>>],
    actions: usize,
    eps: f64,
    kind: Distance,
    base: &ClusterAssignment,
) -> Result<ClusterAssignment> {
    if keys.len() != base.len() {
        return Err(Error::Domain(format!(
            "{} keys for {} instances",
            keys.len(),
            base.len()
        )));
    }
    let terminal = base.terminal_partition();
    // Leaders per base partition: (instance id, provisional label).
    let mut leaders: Vec<Vec<(usize, usize)>> = vec![Vec::new(); base.partition_count()];
    let mut provisional: Vec<Option<usize>> = vec![None; base.len()];
    let mut terminal_label = None;
    let mut next_label = 0;
    for i in 0..base.len() {
        let Some(p) = base.partition(i) else { continue };
        if Some(p) == terminal {
            let label = *terminal_label.get_or_insert_with(|| {
                next_label += 1;
                next_label - 1
            });
            provisional[i] = Some(label);
            continue;
        }
        let key = keys[i]
            .as_deref()
            .ok_or_else(|| Error::Precondition(format!("instance {i} has no clustering key")))?;
        if actions == 0 || key.len() % actions != 0 {
            return Err(Error::Dimension {
                expected: actions,
                found: key.len(),
            });
        }
        let block = key.len() / actions;
        let found = leaders[p].iter().find(|(leader, _)| {
            let lk = keys[*leader].as_deref().expect("leaders have keys");
            distance(key, lk, block, kind) <= eps
        });
        let label = match found {
            Some((_, label)) => *label,
            None => {
                leaders[p].push((i, next_label));
                next_label += 1;
                next_label - 1
            }
        };
        provisional[i] = Some(label);
    }
    ClusterAssignment::new(provisional, next_label, terminal_label)
}

/// Dissolves every non-terminal partition holding fewer than
/// `fraction × (assigned instances)` members; its instances become ignored.
pub fn filter_spurious(c: &ClusterAssignment, fraction: f64) -> Result<ClusterAssignment> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} outside [0, 1)")));
    }
    let sizes = c.sizes();
    let total: usize = sizes.iter().sum();
    let threshold = fraction * total as f64;
    let keep: Vec<bool> = sizes
        .iter()
        .enumerate()
        .map(|(p, &n)| Some(p) == c.terminal_partition() || n as f64 >= threshold)
        .collect();
    let mut renumber = vec![None; sizes.len()];
    let mut next = 0;
    for (p, &k) in keep.iter().enumerate() {
        if k {
            renumber[p] = Some(next);
            next += 1;
        }
    }
    let dissolved = keep.iter().filter(|k| !**k).count();
    if dissolved > 0 {
        log::debug!("dissolved {dissolved} spurious partitions");
    }
    let labels = c.labels().iter().map(|l| l.and_then(|p| renumber[p])).collect();
    ClusterAssignment::new(labels, next, c.terminal_partition().and_then(|t| renumber[t]))
}
