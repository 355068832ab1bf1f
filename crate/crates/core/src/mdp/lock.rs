use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{ActionId, Environment, Observation, Outcome, SimRng, TabularMdp};

/// Digits that unlock the lock; `None` positions match any digit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct GoalPattern(pub Vec<Option<usize>>);

impl GoalPattern {
    pub fn matches(&self, digits: &[usize]) -> bool {
        self.0
            .iter()
            .zip(digits)
            .all(|(g, d)| g.map_or(true, |g| g == *d))
    }
}

impl FromStr for GoalPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('(').trim_end_matches(')');
        inner
            .split(',')
            .map(|t| match t.trim() {
                "*" => Ok(None),
                d => d
                    .parse::<usize>()
                    .map(Some)
                    .map_err(|_| Error::spec("goal", format!("bad digit `{d}` in `{s}`"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(GoalPattern)
    }
}

impl TryFrom<String> for GoalPattern {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GoalPattern> for String {
    fn from(g: GoalPattern) -> String {
        g.to_string()
    }
}

impl fmt::Display for GoalPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|g| g.map_or("*".to_string(), |d| d.to_string()))
            .collect();
        write!(f, "({})", parts.join(","))
    }
}

/// Transfer variants of the lock dynamics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LockVariant {
    #[default]
    None,
    /// Action 0 exchanges the left and middle digits instead of rotating.
    SwapDigits,
    /// The middle dial rotates by −1.
    ReversedDial,
    /// The left dial is the broken one.
    LeftDialBroken,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LockStart {
    /// Every episode starts at all-zero digits.
    #[default]
    Zero,
    /// Uniform over all digit combinations.
    Uniform,
}

/// Combination lock with one action per dial.
///
/// Selecting action `d` rotates dial `d` forward by one digit, except for the
/// broken dial, which is set uniformly at random. Entering a combination that
/// matches the goal pattern pays reward 1 and ends the episode.
///
/// Observations concatenate one one-hot block of length `digits` per dial,
/// with independent uniform noise in `[-noise, noise]` on every entry. The
/// terminal observation is the all-zero vector.
#[derive(Clone, Debug)]
pub struct CombinationLock {
    dials: usize,
    digits: usize,
    broken: usize,
    goal: GoalPattern,
    variant: LockVariant,
    noise: f64,
    start: LockStart,
}

impl CombinationLock {
    pub fn new(
        dials: usize,
        digits: usize,
        broken: usize,
        goal: GoalPattern,
        variant: LockVariant,
        noise: f64,
        start: LockStart,
    ) -> Result<Self> {
        if dials == 0 {
            return Err(Error::spec("dials", "must be >= 1"));
        }
        if digits < 2 {
            return Err(Error::spec("digits", "must be >= 2"));
        }
        if broken >= dials {
            return Err(Error::spec(
                "broken_dial",
                format!("index {broken} is not below the dial count {dials}"),
            ));
        }
        if goal.0.len() != dials {
            return Err(Error::spec(
                "goal",
                format!("pattern {goal} has {} positions for {dials} dials", goal.0.len()),
            ));
        }
        if goal.0.iter().flatten().any(|&d| d >= digits) {
            return Err(Error::spec("goal", format!("pattern {goal} uses a digit >= {digits}")));
        }
        if !(0.0..0.5).contains(&noise) {
            return Err(Error::spec("noise", "amplitude must lie in [0, 0.5)"));
        }
        match variant {
            LockVariant::SwapDigits | LockVariant::ReversedDial if dials < 2 => {
                return Err(Error::spec("variant", "needs at least two dials"));
            }
            LockVariant::LeftDialBroken if broken != 0 => {
                return Err(Error::spec("broken_dial", "left-dial-broken requires broken dial 0"));
            }
            _ => {}
        }
        let digits_total = digits.checked_pow(dials as u32).filter(|n| *n <= 1 << 20);
        if digits_total.is_none() {
            return Err(Error::spec("dials", "state space too large"));
        }
        Ok(CombinationLock {
            dials,
            digits,
            broken,
            goal,
            variant,
            noise,
            start,
        })
    }

    pub fn dials(&self) -> usize {
        self.dials
    }

    pub fn digits(&self) -> usize {
        self.digits
    }

    pub fn combination_count(&self) -> usize {
        self.digits.pow(self.dials as u32)
    }

    pub fn sink(&self) -> usize {
        self.combination_count()
    }

    pub fn encode(&self, digits: &[usize]) -> usize {
        digits.iter().fold(0, |acc, d| acc * self.digits + d)
    }

    pub fn decode(&self, mut state: usize) -> Vec<usize> {
        let mut out = vec![0; self.dials];
        for slot in out.iter_mut().rev() {
            *slot = state % self.digits;
            state /= self.digits;
        }
        out
    }

    /// All possible successors of a combination under an action, with probabilities.
    fn successors(&self, digits: &[usize], action: ActionId) -> Vec<(Vec<usize>, f64)> {
        let d = action.0;
        assert!(d < self.dials, "lock has no action {d}");
        if self.variant == LockVariant::SwapDigits && d == 0 {
            let mut next = digits.to_vec();
            next.swap(0, 1);
            return vec![(next, 1.0)];
        }
        if d == self.broken {
            let p = 1.0 / self.digits as f64;
            return (0..self.digits)
                .map(|k| {
                    let mut next = digits.to_vec();
                    next[d] = k;
                    (next, p)
                })
                .collect();
        }
        let mut next = digits.to_vec();
        next[d] = if self.variant == LockVariant::ReversedDial && d == 1 {
            (digits[d] + self.digits - 1) % self.digits
        } else {
            (digits[d] + 1) % self.digits
        };
        vec![(next, 1.0)]
    }

    fn outcome(&self, digits: &[usize], next: &[usize]) -> (f64, bool) {
        let entering = self.goal.matches(next) && !self.goal.matches(digits);
        (if entering { 1.0 } else { 0.0 }, entering)
    }
}

impl Environment for CombinationLock {
    fn action_count(&self) -> usize {
        self.dials
    }

    fn hidden_state_count(&self) -> usize {
        self.combination_count() + 1
    }

    fn reset(&self, rng: &mut SimRng) -> usize {
        match self.start {
            LockStart::Zero => 0,
            LockStart::Uniform => rng.gen_range(0..self.combination_count()),
        }
    }

    fn step(&self, state: usize, action: ActionId, rng: &mut SimRng) -> Outcome {
        let digits = self.decode(state);
        let d = action.0;
        let mut next = digits.clone();
        if self.variant == LockVariant::SwapDigits && d == 0 {
            next.swap(0, 1);
        } else if d == self.broken {
            next[d] = rng.gen_range(0..self.digits);
        } else if self.variant == LockVariant::ReversedDial && d == 1 {
            next[d] = (digits[d] + self.digits - 1) % self.digits;
        } else {
            next[d] = (digits[d] + 1) % self.digits;
        }
        let (reward, terminal) = self.outcome(&digits, &next);
        Outcome {
            next: self.encode(&next),
            reward,
            terminal,
        }
    }

    fn observe(&self, state: usize, rng: &mut SimRng) -> Observation {
        let digits = self.decode(state);
        let mut v = vec![0.0; self.dials * self.digits];
        for (i, d) in digits.iter().enumerate() {
            v[i * self.digits + d] = 1.0;
        }
        if self.noise > 0.0 {
            for x in v.iter_mut() {
                *x += rng.gen_range(-self.noise..=self.noise);
            }
        }
        Observation::Vector(v)
    }

    fn terminal_observation(&self, _state: usize) -> Observation {
        Observation::Vector(vec![0.0; self.dials * self.digits])
    }

    fn label(&self, obs: &Observation) -> Option<usize> {
        let v = obs.as_vector()?;
        if v.len() != self.dials * self.digits {
            return None;
        }
        if v.iter().all(|x| *x < 0.5) {
            return Some(self.sink());
        }
        let digits: Vec<usize> = v
            .chunks(self.digits)
            .map(|block| {
                block
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, x)| if *x > best.1 { (i, *x) } else { best })
                    .0
            })
            .collect();
        Some(self.encode(&digits))
    }

    fn label_name(&self, label: usize) -> String {
        if label == self.sink() {
            return "terminal".to_string();
        }
        let parts: Vec<String> = self.decode(label).iter().map(|d| d.to_string()).collect();
        format!("({})", parts.join(","))
    }

    fn tabular_model(&self) -> Option<TabularMdp> {
        let n = self.hidden_state_count();
        let sink = self.sink();
        let mut transitions = Vec::new();
        let mut rewards = Vec::new();
        for a in 0..self.dials {
            let mut p = DMatrix::zeros(n, n);
            let mut r = vec![0.0; n];
            for s in 0..sink {
                let digits = self.decode(s);
                for (next, prob) in self.successors(&digits, ActionId(a)) {
                    let (reward, terminal) = self.outcome(&digits, &next);
                    let target = if terminal { sink } else { self.encode(&next) };
                    p[(s, target)] += prob;
                    r[s] += prob * reward;
                }
            }
            p[(sink, sink)] = 1.0;
            transitions.push(p);
            rewards.push(r);
        }
        let terminal = (0..n).map(|s| s == sink).collect();
        let mdp = TabularMdp::new(transitions, rewards, terminal).expect("valid by construction");
        let starts = match self.start {
            LockStart::Zero => vec![0],
            LockStart::Uniform => (0..sink).collect(),
        };
        Some(mdp.with_starts(starts).expect("non-terminal starts"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn lock(digits: usize, variant: LockVariant, broken: usize, goal: &str) -> CombinationLock {
        CombinationLock::new(3, digits, broken, goal.parse().unwrap(), variant, 0.0, LockStart::Zero).unwrap()
    }

    #[test]
    fn rotating_middle_into_goal_pays_and_terminates() {
        let l = lock(10, LockVariant::None, 2, "9,9,*");
        let mut rng = SimRng::seed_from_u64(1);
        let out = l.step(l.encode(&[9, 8, 3]), ActionId(1), &mut rng);
        let next = l.decode(out.next);
        assert_eq!(&next[..2], &[9, 9]);
        assert_eq!(out.reward, 1.0);
        assert!(out.terminal);
    }

    #[test]
    fn broken_dial_spins_uniformly() {
        let l = lock(4, LockVariant::None, 2, "3,3,*");
        let model = l.tabular_model().unwrap();
        let s = l.encode(&[1, 2, 0]);
        for k in 0..4 {
            let p = model.probability(s, ActionId(2), l.encode(&[1, 2, k]));
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn variants_change_dynamics() {
        let mut rng = SimRng::seed_from_u64(2);
        let swap = lock(4, LockVariant::SwapDigits, 2, "1,2,*");
        let out = swap.step(swap.encode(&[0, 3, 1]), ActionId(0), &mut rng);
        assert_eq!(swap.decode(out.next), vec![3, 0, 1]);
        let rev = lock(4, LockVariant::ReversedDial, 2, "2,1,*");
        let out = rev.step(rev.encode(&[0, 0, 1]), ActionId(1), &mut rng);
        assert_eq!(rev.decode(out.next), vec![0, 3, 1]);
        let left = lock(4, LockVariant::LeftDialBroken, 0, "*,3,3");
        let out = left.step(left.encode(&[0, 3, 2]), ActionId(2), &mut rng);
        assert_eq!(left.decode(out.next), vec![0, 3, 3]);
        assert!(out.terminal);
    }

    #[test]
    fn inconsistent_specs_name_the_field() {
        let err = CombinationLock::new(3, 4, 3, "3,3,*".parse().unwrap(), LockVariant::None, 0.0, LockStart::Zero)
            .unwrap_err();
        assert!(err.to_string().contains("broken_dial"));
        let err = CombinationLock::new(3, 4, 2, "3,3".parse().unwrap(), LockVariant::None, 0.0, LockStart::Zero)
            .unwrap_err();
        assert!(err.to_string().contains("goal"));
        let err = CombinationLock::new(3, 4, 2, "3,3,*".parse().unwrap(), LockVariant::LeftDialBroken, 0.0, LockStart::Zero)
            .unwrap_err();
        assert!(err.to_string().contains("broken_dial"));
    }

    #[test]
    fn noisy_observations_label_to_hidden_state() {
        let l = CombinationLock::new(3, 4, 2, "3,3,*".parse().unwrap(), LockVariant::None, 0.2, LockStart::Uniform)
            .unwrap();
        let mut rng = SimRng::seed_from_u64(9);
        for s in 0..64 {
            let obs = l.observe(s, &mut rng);
            assert_eq!(l.label(&obs), Some(s));
        }
        assert_eq!(l.label(&l.terminal_observation(0)), Some(64));
    }

    #[test]
    fn goal_pattern_round_trips() {
        let g: GoalPattern = "(9,9,*)".parse().unwrap();
        assert_eq!(g.0, vec![Some(9), Some(9), None]);
        assert_eq!(g.to_string().parse::<GoalPattern>().unwrap(), g);
    }
}
