use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::scalar::Scalar;

/// Which engine produced a list slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Content,
    Cf,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Content => "content",
            Source::Cf => "cf",
        }
    }

    pub fn other(self) -> Source {
        match self {
            Source::Content => Source::Cf,
            Source::Cf => Source::Content,
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "content" => Ok(Source::Content),
            "cf" => Ok(Source::Cf),
            other => Err(Error::invalid(format!(
                "unknown source '{other}' (expected content or cf)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedItem<T> {
    pub hotel_code: String,
    pub score: T,
    pub source: Source,
}

/// Ordered recommendations for one user.
///
/// Single-engine lists are score-ordered; hybrid lists are slot-ordered and
/// carry per-item provenance instead.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList<T> {
    pub user_id: String,
    pub items: Vec<RankedItem<T>>,
}

impl<T: Scalar> RankedList<T> {
    pub fn empty(user_id: impl Into<String>) -> Self {
        RankedList {
            user_id: user_id.into(),
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn codes(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|i| i.hotel_code.as_str())
    }

    /// Position of `hotel_code` among the first `n` items.
    pub fn position_within(&self, hotel_code: &str, n: usize) -> Option<usize> {
        self.items
            .iter()
            .take(n)
            .position(|i| i.hotel_code == hotel_code)
    }
}

/// Descending by score, ascending by index on ties. NaN sorts last.
pub(crate) fn by_score_desc<T: Scalar>(a: &(usize, T), b: &(usize, T)) -> Ordering {
    match b.1.partial_cmp(&a.1) {
        Some(Ordering::Equal) => a.0.cmp(&b.0),
        Some(o) => o,
        None => a.1.is_nan().cmp(&b.1.is_nan()).then(a.0.cmp(&b.0)),
    }
}

/// The `n` best `(index, score)` candidates, fully ordered by
/// [`by_score_desc`].
pub(crate) fn top_n<T: Scalar>(mut candidates: Vec<(usize, T)>, n: usize) -> Vec<(usize, T)> {
    if n == 0 {
        return Vec::new();
    }
    if candidates.len() > n {
        candidates.select_nth_unstable_by(n - 1, by_score_desc);
        candidates.truncate(n);
    }
    candidates.sort_unstable_by(by_score_desc);
    candidates
}
