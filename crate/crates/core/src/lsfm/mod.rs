//! Linear successor feature model of a clustered dataset.

mod cluster;

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rayon::prelude::*;

use crate::approximator::Classifier;
use crate::error::{Error, Result};
use crate::mdp::{ActionId, Environment, Observation, Policy, SimRng, TrajectoryDataset};

pub use cluster::ClusterAssignment;

/// Per-action reward vectors `w_a`, partition transition matrices `M_a`, their
/// mean `M̄`, and the SF matrices `F = (I − γM̄)⁻¹` and `F_a = I + γM_aF`.
///
/// Row `i` of `F` is the discounted expected partition occupancy from
/// partition `i` under the uniform policy.
#[derive(Clone, Debug, PartialEq)]
pub struct Lsfm {
    pub gamma: f64,
    pub w: Vec<DVector<f64>>,
    pub m: Vec<DMatrix<f64>>,
    pub m_bar: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub f_a: Vec<DMatrix<f64>>,
    /// `(partition, action)` pairs without data; their `M_a` row is a self-loop.
    pub empty_rows: Vec<(usize, ActionId)>,
}

struct Counts {
    reward_sum: Vec<Vec<f64>>,
    reward_n: Vec<Vec<usize>>,
    trans: Vec<DMatrix<f64>>,
}

fn check_domain(data: &TrajectoryDataset, c: &ClusterAssignment) -> Result<()> {
    if c.len() != data.instance_count() {
        return Err(Error::Domain(format!(
            "assignment covers {} instances, dataset has {}",
            c.len(),
            data.instance_count()
        )));
    }
    if data.transition_count() == 0 {
        return Err(Error::Dataset("empty dataset".into()));
    }
    Ok(())
}

fn count(data: &TrajectoryDataset, c: &ClusterAssignment) -> Result<Counts> {
    check_domain(data, c)?;
    let n = c.partition_count();
    let na = data.action_count();
    let mut counts = Counts {
        reward_sum: vec![vec![0.0; n]; na],
        reward_n: vec![vec![0; n]; na],
        trans: vec![DMatrix::zeros(n, n); na],
    };
    for step in data.steps() {
        let Some(i) = c.partition(step.state) else { continue };
        if Some(i) == c.terminal_partition() {
            continue;
        }
        let a = step.action.0;
        counts.reward_sum[a][i] += step.reward;
        counts.reward_n[a][i] += 1;
        if let Some(j) = c.partition(step.next_state) {
            counts.trans[a][(i, j)] += 1.0;
        }
    }
    Ok(counts)
}

fn rewards_from(counts: &Counts) -> Vec<DVector<f64>> {
    counts
        .reward_sum
        .iter()
        .zip(&counts.reward_n)
        .map(|(s, n)| {
            DVector::from_iterator(
                s.len(),
                s.iter().zip(n).map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 }),
            )
        })
        .collect()
}

fn transitions_from(counts: &Counts, terminal: Option<usize>) -> (Vec<DMatrix<f64>>, Vec<(usize, ActionId)>) {
    let mut empty = Vec::new();
    let m = counts
        .trans
        .iter()
        .enumerate()
        .map(|(a, t)| {
            let mut m = t.clone();
            for i in 0..m.nrows() {
                let total: f64 = m.row(i).sum();
                if total > 0.0 {
                    m.row_mut(i).unscale_mut(total);
                } else {
                    m.row_mut(i).fill(0.0);
                    m[(i, i)] = 1.0;
                    if Some(i) != terminal {
                        empty.push((i, ActionId(a)));
                    }
                }
            }
            m
        })
        .collect();
    (m, empty)
}

/// `w_a(i)`: mean reward of transitions leaving partition `i` under action `a`.
///
/// Pairs without data and the terminal partition get 0.
pub fn estimate_reward_vectors(data: &TrajectoryDataset, c: &ClusterAssignment) -> Result<Vec<DVector<f64>>> {
    let counts = count(data, c)?;
    for (a, n) in counts.reward_n.iter().enumerate() {
        for (i, &k) in n.iter().enumerate() {
            if k == 0 && Some(i) != c.terminal_partition() {
                log::warn!("no transitions from partition {i} under action {a}; reward set to 0");
            }
        }
    }
    Ok(rewards_from(&counts))
}

/// Empirical row-stochastic `M_a` for every action, and their mean `M̄`.
///
/// Rows without data become self-loops; the terminal partition is absorbing.
pub fn estimate_transition_matrices(
    data: &TrajectoryDataset,
    c: &ClusterAssignment,
) -> Result<(Vec<DMatrix<f64>>, DMatrix<f64>)> {
    let counts = count(data, c)?;
    let (m, empty) = transitions_from(&counts, c.terminal_partition());
    for (i, a) in empty {
        log::warn!("no transitions from partition {i} under action {a}; using a self-loop");
    }
    let m_bar = mean(&m);
    Ok((m, m_bar))
}

fn mean(m: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = m[0].clone();
    for x in &m[1..] {
        out += x;
    }
    out / m.len() as f64
}

/// Solves `(I − γM̄)F = I` and forms `F_a = I + γM_aF`.
pub fn compute_f_matrices(m: &[DMatrix<f64>], gamma: f64) -> Result<(DMatrix<f64>, Vec<DMatrix<f64>>)> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
    }
    if m.is_empty() {
        return Err(Error::InvalidArgument("no transition matrices".into()));
    }
    let n = m[0].nrows();
    for (a, x) in m.iter().enumerate() {
        if x.nrows() != n || x.ncols() != n {
            return Err(Error::Dimension {
                expected: n,
                found: if x.nrows() != n { x.nrows() } else { x.ncols() },
            });
        }
        for i in 0..n {
            let row = x.row(i);
            if row.iter().any(|v| *v < 0.0) || (row.sum() - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("M_{a} row {i} is not a distribution")));
            }
        }
    }
    let eye = DMatrix::<f64>::identity(n, n);
    let system = &eye - mean(m) * gamma;
    let f = system
        .lu()
        .solve(&eye)
        .ok_or_else(|| Error::Numeric("I − γM̄ is singular".into()))?;
    let f_a = m.iter().map(|ma| &eye + ma * &f * gamma).collect();
    Ok((f, f_a))
}

/// `e_current + γ Fᵀ p` for a predicted next-partition distribution `p`.
pub fn sf_from_prediction(current: usize, p: &[f64], f: &DMatrix<f64>, gamma: f64) -> Result<DVector<f64>> {
    let n = f.nrows();
    if p.len() != n {
        return Err(Error::Dimension {
            expected: n,
            found: p.len(),
        });
    }
    if current >= n {
        return Err(Error::Dimension {
            expected: n,
            found: current + 1,
        });
    }
    let mut psi = f.tr_mul(&DVector::from_column_slice(p)) * gamma;
    psi[current] += 1.0;
    Ok(psi)
}

/// Predicted SF of a dataset instance `s` under action `a`, using the
/// next-partition classifier `fi`.
pub fn predict_sf(
    c: &ClusterAssignment,
    f: &DMatrix<f64>,
    fi: &Classifier,
    instance: usize,
    s: &Observation,
    a: ActionId,
    gamma: f64,
) -> Result<DVector<f64>> {
    if fi.class_count() != c.partition_count() {
        return Err(Error::Dimension {
            expected: c.partition_count(),
            found: fi.class_count(),
        });
    }
    let current = c
        .partition(instance)
        .ok_or_else(|| Error::Precondition(format!("instance {instance} is ignored")))?;
    sf_from_prediction(current, &fi.predict_distribution(s, a)?, f, gamma)
}

/// Monte Carlo estimate of `Σ_t γ^(t-1) e_{c(s_t)}` from hidden state `s`,
/// taking `a` first and then following `policy`, truncated at `horizon` steps.
///
/// `c` assigns a partition to every hidden state of `env`, including the
/// terminal sink, which is absorbing. After a terminal step the remaining
/// occupancy goes to `c`'s terminal partition.
#[allow(clippy::too_many_arguments)]
pub fn monte_carlo_sf(
    env: &dyn Environment,
    c: &ClusterAssignment,
    policy: &dyn Policy,
    s: usize,
    a: ActionId,
    gamma: f64,
    horizon: usize,
    rollouts: usize,
    seed: u64,
) -> Result<DVector<f64>> {
    if c.len() != env.hidden_state_count() {
        return Err(Error::Domain(format!(
            "assignment covers {} states, environment has {}",
            c.len(),
            env.hidden_state_count()
        )));
    }
    if rollouts == 0 || horizon == 0 {
        return Err(Error::InvalidArgument("horizon and rollouts must be >= 1".into()));
    }
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma {gamma} outside [0, 1)")));
    }
    let n = c.partition_count();
    let part = |h: usize| {
        c.partition(h)
            .ok_or_else(|| Error::Precondition(format!("hidden state {h} has no partition")))
    };
    part(s)?;
    let runs: Vec<Result<DVector<f64>>> = (0..rollouts)
        .into_par_iter()
        .map(|r| {
            let mut rng = SimRng::seed_from_u64(seed);
            rng.set_stream(r as u64);
            let mut psi = DVector::zeros(n);
            let mut state = s;
            let mut action = a;
            let mut discount = 1.0;
            for t in 0..horizon {
                psi[part(state)?] += discount;
                if t + 1 == horizon {
                    break;
                }
                let out = env.step(state, action, &mut rng);
                discount *= gamma;
                if out.terminal {
                    // The sink repeats for every remaining step. `out.next` is the
                    // state entered, which need not be the sink itself.
                    let sink = match c.terminal_partition() {
                        Some(t) => t,
                        None => part(out.next)?,
                    };
                    let remaining = (horizon - t - 1) as i32;
                    psi[sink] += discount * (1.0 - gamma.powi(remaining)) / (1.0 - gamma);
                    break;
                }
                state = out.next;
                action = policy.act(&env.observe(state, &mut rng), &mut rng);
            }
            Ok(psi)
        })
        .collect();
    let mut total = DVector::zeros(n);
    for r in runs {
        total += r?;
    }
    Ok(total / rollouts as f64)
}

impl Lsfm {
    pub fn build(data: &TrajectoryDataset, c: &ClusterAssignment, gamma: f64) -> Result<Self> {
        let counts = count(data, c)?;
        let w = rewards_from(&counts);
        let (m, empty_rows) = transitions_from(&counts, c.terminal_partition());
        for (i, a) in &empty_rows {
            log::debug!("partition {i} has no data for action {a}");
        }
        let (f, f_a) = compute_f_matrices(&m, gamma)?;
        Ok(Lsfm {
            gamma,
            w,
            m_bar: mean(&m),
            m,
            f,
            f_a,
            empty_rows,
        })
    }

    /// Rebuilds `M̄`, `F` and `F_a` from reward vectors and transition matrices.
    pub fn from_parts(w: Vec<DVector<f64>>, m: Vec<DMatrix<f64>>, gamma: f64) -> Result<Self> {
        if w.len() != m.len() {
            return Err(Error::Dimension {
                expected: m.len(),
                found: w.len(),
            });
        }
        let (f, f_a) = compute_f_matrices(&m, gamma)?;
        Ok(Lsfm {
            gamma,
            w,
            m_bar: mean(&m),
            m,
            f,
            f_a,
            empty_rows: Vec::new(),
        })
    }

    pub fn partition_count(&self) -> usize {
        self.f.nrows()
    }

    pub fn action_count(&self) -> usize {
        self.m.len()
    }

    /// Largest deviations from `(I − γM̄)F = I` and `F_a = I + γM_aF`.
    pub fn identity_residuals(&self) -> (f64, f64) {
        let n = self.partition_count();
        let eye = DMatrix::<f64>::identity(n, n);
        let inv = ((&eye - &self.m_bar * self.gamma) * &self.f - &eye).amax();
        let fa = self
            .m
            .iter()
            .zip(&self.f_a)
            .map(|(m, fa)| (fa - (&eye + m * &self.f * self.gamma)).amax())
            .fold(0.0, f64::max);
        (inv, fa)
    }

    /// Writes `w.csv`, `M_a.csv`, `M_bar.csv`, `F.csv`, `F_a.csv` and `manifest.txt`.
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let n = self.partition_count();
        let header = |prefix: &[&str]| -> Vec<String> {
            prefix
                .iter()
                .map(|s| s.to_string())
                .chain((0..n).map(|j| j.to_string()))
                .collect()
        };
        let fmt = |v: f64| format!("{v:?}");
        let write = |name: &str, head: Vec<String>, rows: Vec<Vec<String>>| -> Result<()> {
            let path = dir.join(name);
            let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = csv::Writer::from_writer(file);
            w.write_record(&head)?;
            for r in rows {
                w.write_record(&r)?;
            }
            w.flush().map_err(|e| Error::io(&path, e))?;
            Ok(())
        };
        let per_action = |mats: &[DMatrix<f64>]| -> Vec<Vec<String>> {
            mats.iter()
                .enumerate()
                .flat_map(|(a, m)| {
                    (0..n).map(move |i| {
                        [a.to_string(), i.to_string()]
                            .into_iter()
                            .chain(m.row(i).iter().map(|v| fmt(*v)))
                            .collect()
                    })
                })
                .collect()
        };
        let single = |m: &DMatrix<f64>| -> Vec<Vec<String>> {
            (0..n)
                .map(|i| std::iter::once(i.to_string()).chain(m.row(i).iter().map(|v| fmt(*v))).collect())
                .collect()
        };
        write(
            "w.csv",
            header(&["action"]),
            self.w
                .iter()
                .enumerate()
                .map(|(a, w)| std::iter::once(a.to_string()).chain(w.iter().map(|v| fmt(*v))).collect())
                .collect(),
        )?;
        write("M_a.csv", header(&["action", "from"]), per_action(&self.m))?;
        write("M_bar.csv", header(&["from"]), single(&self.m_bar))?;
        write("F.csv", header(&["from"]), single(&self.f))?;
        write("F_a.csv", header(&["action", "from"]), per_action(&self.f_a))?;
        let manifest = format!(
            "gamma={:?}\npartition_count={n}\naction_count={}\nempty_rows={}\n",
            self.gamma,
            self.action_count(),
            self.empty_rows
                .iter()
                .map(|(i, a)| format!("{i}:{a}"))
                .collect::<Vec<_>>()
                .join(";")
        );
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Reads a bundle written by [`Lsfm::write_bundle`], recomputing `F` and `F_a`.
    pub fn read_bundle(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let gamma: f64 = manifest
            .lines()
            .find_map(|l| l.strip_prefix("gamma="))
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| Error::Config(format!("{} lacks gamma", manifest_path.display())))?;
        let rows = |name: &str| -> Result<Vec<Vec<f64>>> {
            let path = dir.join(name);
            let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut r = csv::Reader::from_reader(file);
            r.records()
                .map(|rec| {
                    let rec = rec?;
                    rec.iter()
                        .map(|v| v.parse::<f64>().map_err(|_| Error::Dataset(format!("{name}: bad number `{v}`"))))
                        .collect()
                })
                .collect()
        };
        let w_rows = rows("w.csv")?;
        let w: Vec<DVector<f64>> = w_rows.iter().map(|r| DVector::from_column_slice(&r[1..])).collect();
        let n = w.first().map_or(0, |v| v.len());
        let mut m = vec![DMatrix::zeros(n, n); w.len()];
        for r in rows("M_a.csv")? {
            let (a, i) = (r[0] as usize, r[1] as usize);
            if a >= m.len() || i >= n || r.len() != n + 2 {
                return Err(Error::Dataset("M_a.csv: row out of range".into()));
            }
            for j in 0..n {
                m[a][(i, j)] = r[j + 2];
            }
        }
        Self::from_parts(w, m, gamma)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::Transition;
    use approx::assert_abs_diff_eq;

    fn tr(s: usize, a: usize, r: f64, n: usize, term: bool) -> Transition {
        Transition {
            state: Observation::Discrete(s),
            action: ActionId(a),
            reward: r,
            next_state: Observation::Discrete(n),
            next_is_terminal: term,
        }
    }

    #[test]
    fn single_transition_reward() {
        let ds = TrajectoryDataset::from_trajectories(1, vec![vec![tr(0, 0, 0.5, 1, false)]]).unwrap();
        let c = ClusterAssignment::from_labels(vec![0, 1], None).unwrap();
        let w = estimate_reward_vectors(&ds, &c).unwrap();
        assert_eq!(w[0][0], 0.5);
    }

    #[test]
    fn flip_matrix() {
        let ds = TrajectoryDataset::from_trajectories(
            1,
            vec![vec![tr(0, 0, 0.0, 1, false), tr(1, 0, 0.0, 0, false)]],
        )
        .unwrap();
        let c = ClusterAssignment::from_labels(vec![0, 1], None).unwrap();
        let (m, _) = estimate_transition_matrices(&ds, &c).unwrap();
        assert_eq!(m[0], DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn self_loop_f() {
        let (f, fa) = compute_f_matrices(&[DMatrix::from_element(1, 1, 1.0)], 0.9).unwrap();
        assert_abs_diff_eq!(f[(0, 0)], 10.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fa[0][(0, 0)], 10.0, epsilon = 1e-12);
    }

    #[test]
    fn flip_f_multiplies_back_to_identity() {
        let flip = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        let (f, _) = compute_f_matrices(&[flip.clone()], 0.5).unwrap();
        let back = (DMatrix::identity(2, 2) - &flip * 0.5) * &f;
        assert_abs_diff_eq!(back, DMatrix::identity(2, 2), epsilon = 1e-12);
        assert_abs_diff_eq!(f[(0, 0)], 4.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f[(0, 1)], 2.0 / 3.0, epsilon = 1e-12);
    }

    #[test]
    fn zero_discount_sf_is_the_one_hot() {
        let f = DMatrix::identity(3, 3);
        let psi = sf_from_prediction(1, &[0.2, 0.3, 0.5], &f, 0.0).unwrap();
        assert_eq!(psi.as_slice(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn terminal_sf_formula() {
        let m = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let (f, _) = compute_f_matrices(&[m], 0.9).unwrap();
        let psi = sf_from_prediction(1, &[0.0, 1.0], &f, 0.9).unwrap();
        assert_abs_diff_eq!(psi[1], 1.0 + 0.9 * f[(1, 1)], epsilon = 1e-12);
        assert_abs_diff_eq!(psi[1], 10.0, epsilon = 1e-9);
    }

    #[test]
    fn mismatched_prediction_length_is_an_error() {
        let f = DMatrix::identity(3, 3);
        assert!(matches!(
            sf_from_prediction(0, &[1.0, 0.0], &f, 0.5),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn bundle_round_trip() {
        let ds = TrajectoryDataset::from_trajectories(
            2,
            vec![vec![tr(0, 0, 0.0, 1, false), tr(1, 1, 1.0, 2, true)]],
        )
        .unwrap();
        let c = ClusterAssignment::from_labels(vec![0, 1, 2], Some(2)).unwrap();
        let lsfm = Lsfm::build(&ds, &c, 0.9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        lsfm.write_bundle(dir.path()).unwrap();
        let back = Lsfm::read_bundle(dir.path()).unwrap();
        assert_eq!(back.w, lsfm.w);
        assert_eq!(back.m, lsfm.m);
        assert_eq!(back.f, lsfm.f);
    }
}
