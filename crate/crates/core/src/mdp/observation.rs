use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A state observation: either an integer index or a fixed-length real vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Observation {
    Discrete(usize),
    Vector(Vec<f64>),
}

/// Hashable, bit-exact identity of an [`Observation`].
///
/// Two vector observations share a key only if every component is bit-identical
/// (with `-0.0` folded onto `0.0`).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObsKey {
    Discrete(usize),
    Vector(Vec<u64>),
}

/// Shape of an observation space, used to reject mismatched queries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ObsKind {
    Discrete,
    Vector(usize),
}

impl fmt::Display for ObsKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ObsKind::Discrete => write!(f, "discrete"),
            ObsKind::Vector(d) => write!(f, "vector[{d}]"),
        }
    }
}

impl Observation {
    pub fn key(&self) -> ObsKey {
        match self {
            Observation::Discrete(i) => ObsKey::Discrete(*i),
            Observation::Vector(v) => ObsKey::Vector(
                v.iter()
                    .map(|x| if *x == 0.0 { 0u64 } else { x.to_bits() })
                    .collect(),
            ),
        }
    }

    pub fn kind(&self) -> ObsKind {
        match self {
            Observation::Discrete(_) => ObsKind::Discrete,
            Observation::Vector(v) => ObsKind::Vector(v.len()),
        }
    }

    pub fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Observation::Vector(v) => Some(v),
            Observation::Discrete(_) => None,
        }
    }

    /// Text form used by the dataset CSV: the integer id, or `;`-joined decimals.
    ///
    /// Vector components always carry a decimal point or exponent so that a
    /// one-dimensional vector never reads back as a discrete index.
    pub fn to_repr(&self) -> String {
        match self {
            Observation::Discrete(i) => i.to_string(),
            Observation::Vector(v) => v
                .iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(";"),
        }
    }
}

impl FromStr for Observation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if let Ok(i) = s.parse::<usize>() {
            return Ok(Observation::Discrete(i));
        }
        let values = s
            .split(';')
            .map(|t| {
                t.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Dataset(format!("bad observation `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Dataset(format!("non-finite observation `{s}`")));
        }
        Ok(Observation::Vector(values))
    }
}

/// Index of an action in `[0, action_count)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ActionId(pub usize);

impl ActionId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for ActionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn one_dimensional_vector_is_not_read_as_discrete() {
        let obs = Observation::Vector(vec![1.0]);
        assert_eq!(obs.to_repr(), "1.0");
        assert_eq!(obs.to_repr().parse::<Observation>().unwrap(), obs);
        assert_eq!("7".parse::<Observation>().unwrap(), Observation::Discrete(7));
    }

    #[test]
    fn negative_zero_shares_key_with_zero() {
        let a = Observation::Vector(vec![0.0, 1.5]);
        let b = Observation::Vector(vec![-0.0, 1.5]);
        assert_eq!(a.key(), b.key());
    }

    proptest! {
        #[test]
        fn repr_round_trips(v in prop::collection::vec(-1e6f64..1e6, 1..6)) {
            let obs = Observation::Vector(v);
            let back: Observation = obs.to_repr().parse().unwrap();
            prop_assert_eq!(back.key(), obs.key());
        }
    }
}
