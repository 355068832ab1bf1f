use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::lsfm::ClusterAssignment;
use crate::mdp::{ActionId, TabularMdp};

/// How close two states' statistics must be to share an oracle block.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OracleTolerance {
    /// Rewards and block-transition profiles equal up to this absolute L1 slack.
    Exact(f64),
    /// Reward profiles within `eps_r` and block-transition profiles within `eps_psi`, both in L1.
    Eps { eps_r: f64, eps_psi: f64 },
}

impl Default for OracleTolerance {
    fn default() -> Self {
        OracleTolerance::Exact(1e-9)
    }
}

impl OracleTolerance {
    fn reward(self) -> f64 {
        match self {
            OracleTolerance::Exact(t) => t,
            OracleTolerance::Eps { eps_r, .. } => eps_r,
        }
    }

    fn transition(self) -> f64 {
        match self {
            OracleTolerance::Exact(t) => t,
            OracleTolerance::Eps { eps_psi, .. } => eps_psi,
        }
    }
}

fn l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

/// Leader-splits every non-terminal block by `key`, then renumbers blocks by
/// smallest member.
fn split(labels: &[usize], terminal: &[bool], keys: &[Vec<f64>], tol: f64) -> Vec<usize> {
    let mut leaders: Vec<(usize, usize)> = Vec::new();
    let mut provisional = vec![0; labels.len()];
    let mut next = 0;
    let mut terminal_label = None;
    for s in 0..labels.len() {
        if terminal[s] {
            provisional[s] = *terminal_label.get_or_insert_with(|| {
                next += 1;
                next - 1
            });
            continue;
        }
        let found = leaders
            .iter()
            .find(|(leader, _)| labels[*leader] == labels[s] && l1(&keys[*leader], &keys[s]) <= tol);
        provisional[s] = match found {
            Some((_, l)) => *l,
            None => {
                leaders.push((s, next));
                next += 1;
                next - 1
            }
        };
    }
    provisional
}

fn block_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}

/// Coarsest partition of the MDP's states that separates terminal states,
/// one-step rewards and block-transition probabilities, found by iterated
/// block splitting. Blocks are numbered by their smallest state id.
pub fn oracle_partition(mdp: &TabularMdp, tol: OracleTolerance) -> ClusterAssignment {
    let n = mdp.state_count();
    let actions = mdp.action_count();
    let terminal = mdp.terminal_states();
    let rewards: Vec<Vec<f64>> = (0..n)
        .map(|s| (0..actions).map(|a| mdp.reward(s, ActionId(a))).collect())
        .collect();
    let start = vec![0; n];
    let mut labels = split(&start, terminal, &rewards, tol.reward());
    loop {
        let k = block_count(&labels);
        let profiles: Vec<Vec<f64>> = (0..n)
            .map(|s| {
                let mut p = vec![0.0; actions * k];
                for a in 0..actions {
                    let row = mdp.transition(ActionId(a)).row(s);
                    for (t, v) in row.iter().enumerate() {
                        p[a * k + labels[t]] += v;
                    }
                }
                p
            })
            .collect();
        let next = split(&labels, terminal, &profiles, tol.transition());
        let done = block_count(&next) == k;
        labels = next;
        if done {
            break;
        }
    }
    let t = (0..n).find(|&s| terminal[s]).map(|s| labels[s]);
    ClusterAssignment::from_labels(labels, t).expect("labels are dense")
}

/// Exact successor features `ψ(s, a)` of the uniform-random policy over the
/// one-hot features of partition `c`: `Ψ̄ = (I − γP̄)⁻¹E`, `ψ(s, a) = e_{c(s)} + γ(P_aΨ̄)_s`.
pub fn exact_sf(mdp: &TabularMdp, c: &ClusterAssignment, gamma: f64) -> Result<Vec<Vec<DVector<f64>>>> {
    let n = mdp.state_count();
    if c.len() != n {
        return Err(Error::Domain(format!("{} labels for {n} states", c.len())));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
    }
    let k = c.partition_count();
    let mut e = DMatrix::<f64>::zeros(n, k);
    for s in 0..n {
        let p = c
            .partition(s)
            .ok_or_else(|| Error::Precondition(format!("state {s} is unassigned")))?;
        e[(s, p)] = 1.0;
    }
    let actions = mdp.action_count();
    let mut p_bar = DMatrix::<f64>::zeros(n, n);
    for a in 0..actions {
        p_bar += mdp.transition(ActionId(a));
    }
    p_bar /= actions as f64;
    let system = DMatrix::<f64>::identity(n, n) - p_bar * gamma;
    let psi_bar = system
        .lu()
        .solve(&e)
        .ok_or_else(|| Error::Numeric("I − γP̄ is singular".into()))?;
    let per_action: Vec<DMatrix<f64>> = (0..actions).map(|a| mdp.transition(ActionId(a)) * &psi_bar).collect();
    Ok((0..n)
        .map(|s| {
            per_action
                .iter()
                .map(|pa| e.row(s).transpose() + pa.row(s).transpose() * gamma)
                .collect()
        })
        .collect())
}

/// Outcome of [`check_sub_clustering`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SubClustering {
    Holds,
    /// Two instances separated by `c` but sharing a partition of `c_star`.
    Violated { first: usize, second: usize },
}

impl SubClustering {
    pub fn holds(self) -> bool {
        self == SubClustering::Holds
    }
}

/// Checks `c(s) ≠ c(s̃) ⟹ c*(s) ≠ c*(s̃)` over all pairs of instances
/// assigned in both. Equivalently, every partition of `c_star` lies inside a
/// single partition of `c`.
pub fn check_sub_clustering(c: &ClusterAssignment, c_star: &ClusterAssignment) -> Result<SubClustering> {
    if c.len() != c_star.len() {
        return Err(Error::Domain(format!("{} versus {} instances", c.len(), c_star.len())));
    }
    // Per c* partition: its c partition and the instance that fixed it.
    let mut seen: Vec<Option<(usize, usize)>> = vec![None; c_star.partition_count()];
    for i in 0..c.len() {
        let (Some(p), Some(q)) = (c.partition(i), c_star.partition(i)) else { continue };
        match seen[q] {
            None => seen[q] = Some((p, i)),
            Some((p0, first)) if p0 != p => return Ok(SubClustering::Violated { first, second: i }),
            Some(_) => {}
        }
    }
    Ok(SubClustering::Holds)
}

/// The 0/1 matrix `Φ` with `Φ(k, l) = 1` iff some instance has `c_i = k` and
/// `c* = l`, so that `Φ e_{c*(s)} = e_{c_i(s)}`.
pub fn projection_matrix(c_i: &ClusterAssignment, c_star: &ClusterAssignment) -> Result<DMatrix<f64>> {
    if let SubClustering::Violated { first, second } = check_sub_clustering(c_i, c_star)? {
        return Err(Error::Precondition(format!(
            "instances {first} and {second} share a target partition but not a source partition"
        )));
    }
    let mut phi = DMatrix::zeros(c_i.partition_count(), c_star.partition_count());
    for i in 0..c_i.len() {
        if let (Some(k), Some(l)) = (c_i.partition(i), c_star.partition(i)) {
            phi[(k, l)] = 1.0;
        }
    }
    if let Some(l) = (0..phi.ncols()).find(|&l| phi.column(l).sum() == 0.0) {
        return Err(Error::Precondition(format!("target partition {l} has no instance")));
    }
    Ok(phi)
}
