//! Identifiers and the ranked-list types shared by every recommender.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct UserId(pub u32);

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for UserId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommenderKind {
    Content,
    Hybrid,
    Demographic,
    Collaborative,
}

impl RecommenderKind {
    /// Short label used in metric tables.
    pub fn label(self) -> &'static str {
        match self {
            RecommenderKind::Content => "Content",
            RecommenderKind::Hybrid => "Hybrid",
            RecommenderKind::Demographic => "Demog",
            RecommenderKind::Collaborative => "Collab",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub item: ItemId,
    pub score: f64,
    /// Item did not pass the popularity filter and was appended to keep the
    /// list length stable.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub backfilled: bool,
    /// Recommenders whose own top-N contained this item.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<RecommenderKind>,
}

impl Recommendation {
    pub fn new(item: ItemId, score: f64) -> Self {
        Recommendation {
            item,
            score,
            backfilled: false,
            sources: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecList {
    pub items: Vec<Recommendation>,
    /// Preferences were all zero and the uniform fallback was used.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub fallback: bool,
    /// Set when the list is empty on purpose (e.g. no neighbours with feedback).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

impl RecList {
    pub fn item_ids(&self) -> Vec<ItemId> {
        self.items.iter().map(|r| r.item).collect()
    }

    pub fn empty_with(diagnostic: impl Into<String>) -> Self {
        RecList {
            items: Vec::new(),
            fallback: false,
            diagnostic: Some(diagnostic.into()),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Descending score, ties broken by ascending item id.
pub(crate) fn by_score_then_id(a: &(ItemId, f64), b: &(ItemId, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Sorts `(item, score)` pairs best-first and keeps the first `n`.
pub fn top_n(mut scored: Vec<(ItemId, f64)>, n: usize) -> Vec<(ItemId, f64)> {
    scored.sort_by(by_score_then_id);
    scored.truncate(n);
    scored
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ties_break_by_ascending_id() {
        let ranked = top_n(
            vec![(ItemId(3), 0.5), (ItemId(1), 0.5), (ItemId(2), 0.9)],
            3,
        );
        let ids: Vec<u32> = ranked.iter().map(|(i, _)| i.0).collect();
        assert_eq!(ids, vec![2, 1, 3]);
    }
}
