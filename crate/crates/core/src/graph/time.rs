use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// A set of time steps: every step, every step from some `t` on, or an
/// explicit list.
///
/// Serialized as `"all"`, `{"from": t}` or `[t0, t1, ...]`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub enum TimeSet {
    #[default]
    All,
    From(usize),
    Only(BTreeSet<usize>),
}

impl TimeSet {
    pub fn only(times: impl IntoIterator<Item = usize>) -> Self {
        TimeSet::Only(times.into_iter().collect())
    }

    /// Inclusive range `lo..=hi`.
    pub fn range(lo: usize, hi: usize) -> Self {
        TimeSet::Only((lo..=hi).collect())
    }

    pub fn contains(&self, t: usize) -> bool {
        match self {
            TimeSet::All => true,
            TimeSet::From(lo) => t >= *lo,
            TimeSet::Only(set) => set.contains(&t),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, TimeSet::Only(s) if s.is_empty())
    }

    /// Whether some step lies in both sets.
    pub fn overlaps(&self, other: &TimeSet) -> bool {
        match (self, other) {
            (TimeSet::Only(a), b) | (b, TimeSet::Only(a)) => a.iter().any(|&t| b.contains(t)),
            _ => true,
        }
    }
}

impl fmt::Display for TimeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeSet::All => write!(f, "all"),
            TimeSet::From(t) => write!(f, "t>={t}"),
            TimeSet::Only(s) => {
                let v: Vec<String> = s.iter().map(usize::to_string).collect();
                write!(f, "{{{}}}", v.join(","))
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
enum Repr {
    Keyword(String),
    From { from: usize },
    List(BTreeSet<usize>),
}

impl Serialize for TimeSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            TimeSet::All => Repr::Keyword("all".into()),
            TimeSet::From(t) => Repr::From { from: *t },
            TimeSet::Only(set) => Repr::List(set.clone()),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TimeSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        match Repr::deserialize(d).map_err(|_| {
            serde::de::Error::custom("expected \"all\", {\"from\": t} or a list of time steps")
        })? {
            Repr::Keyword(k) if k == "all" => Ok(TimeSet::All),
            Repr::Keyword(k) => Err(serde::de::Error::custom(format!(
                "unknown time set `{k}`, expected \"all\""
            ))),
            Repr::From { from } => Ok(TimeSet::From(from)),
            Repr::List(set) => Ok(TimeSet::Only(set)),
        }
    }
}
