use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// Outcome of a one-sided rank-sum (Mann–Whitney U) test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RankSum {
    /// U statistic of the first sample.
    pub u: f64,
    pub z: f64,
    /// Probability of a U at least this large if both samples share a distribution.
    pub p_greater: f64,
}

/// Tests whether values of `x` tend to exceed values of `y`, using the normal
/// approximation with tie and continuity corrections.
pub fn rank_sum_greater(x: &[f64], y: &[f64]) -> Result<RankSum> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InvalidArgument("rank-sum test needs two non-empty samples".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument("rank-sum test needs finite values".into()));
    }
    let mut all: Vec<(f64, bool)> = x.iter().map(|v| (*v, true)).chain(y.iter().map(|v| (*v, false))).collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = all.len();
    let mut rank_x = 0.0;
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their average.
        let rank = (i + j + 2) as f64 / 2.0;
        rank_x += all[i..=j].iter().filter(|e| e.1).count() as f64 * rank;
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let (n1, n2, n) = (x.len() as f64, y.len() as f64, n as f64);
    let u = rank_x - n1 * (n1 + 1.0) / 2.0;
    let mean = n1 * n2 / 2.0;
    let var = n1 * n2 / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(RankSum { u, z: 0.0, p_greater: 0.5 });
    }
    let z = (u - mean - 0.5) / var.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(RankSum {
        u,
        z,
        p_greater: normal.sf(z),
    })
}
