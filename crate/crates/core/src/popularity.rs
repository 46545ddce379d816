//! Damped-mean item popularity and the popularity → content cascade.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::ontology::ContentMatrices;
use crate::preferences::{content_scores, ContentWeights, PreferenceState};
use crate::rec::{by_score_then_id, RecList, Recommendation};
use crate::{Error, ItemId, Result};

pub const DEFAULT_DAMPING: f64 = 5.0;
pub const DEFAULT_THRESHOLD: f64 = 2.5;
/// Prior used for the global mean before any rating exists.
pub const DEFAULT_PRIOR: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopularityMode {
    Damped,
    /// Plain average; unrated items use the global mean.
    RawMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PopularityConfig {
    pub damping: f64,
    pub threshold: f64,
    pub mode: PopularityMode,
}

impl Default for PopularityConfig {
    fn default() -> Self {
        PopularityConfig {
            damping: DEFAULT_DAMPING,
            threshold: DEFAULT_THRESHOLD,
            mode: PopularityMode::Damped,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ItemRatings {
    pub n: usize,
    pub sum: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PopularityStats {
    pub items: BTreeMap<ItemId, ItemRatings>,
    /// Overrides the observed global mean when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior: Option<f64>,
}

impl PopularityStats {
    pub fn from_ratings(ratings: impl IntoIterator<Item = (ItemId, f64)>) -> Self {
        let mut stats = PopularityStats::default();
        for (item, r) in ratings {
            stats.add(item, r);
        }
        stats
    }

    pub fn add(&mut self, item: ItemId, rating: f64) {
        let slot = self.items.entry(item).or_default();
        slot.n += 1;
        slot.sum += rating;
    }

    pub fn get(&self, item: ItemId) -> ItemRatings {
        self.items.get(&item).copied().unwrap_or_default()
    }

    pub fn rating_count(&self) -> usize {
        self.items.values().map(|r| r.n).sum()
    }

    /// Mean of all observed ratings, 3.0 without ratings.
    pub fn global_mean(&self) -> f64 {
        if let Some(p) = self.prior {
            return p;
        }
        let n = self.rating_count();
        if n == 0 {
            DEFAULT_PRIOR
        } else {
            self.items.values().map(|r| r.sum).sum::<f64>() / n as f64
        }
    }

    /// `(Σr + k·r̄_G) / (n + k)`.
    pub fn damped_mean(&self, item: ItemId, k: f64) -> Result<f64> {
        if !(k >= 0.0) {
            return Err(Error::InvalidArgument(format!("damping {k} must be >= 0")));
        }
        let r = self.get(item);
        if r.n == 0 && k == 0.0 {
            return Err(Error::Undefined(format!(
                "damped mean of unrated item {item} with zero damping"
            )));
        }
        let g = self.global_mean();
        // Split the division so huge k converges on g without cancellation.
        let n = r.n as f64;
        Ok(r.sum / (n + k) + g * (k / (n + k)))
    }

    /// Popularity score under the configured mode.
    pub fn score(&self, item: ItemId, cfg: &PopularityConfig) -> Result<f64> {
        match cfg.mode {
            PopularityMode::Damped => self.damped_mean(item, cfg.damping),
            PopularityMode::RawMean => {
                let r = self.get(item);
                Ok(if r.n == 0 {
                    self.global_mean()
                } else {
                    r.sum / r.n as f64
                })
            }
        }
    }
}

/// Items whose popularity score reaches the threshold.
pub fn popularity_prefilter(
    items: &[ItemId],
    stats: &PopularityStats,
    cfg: &PopularityConfig,
) -> Result<BTreeSet<ItemId>> {
    // thresholds above 5 are allowed; they simply filter every rated item
    if !(cfg.threshold >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold {} must be >= 0",
            cfg.threshold
        )));
    }
    let mut pass = BTreeSet::new();
    for &item in items {
        let r = stats.get(item);
        let ok = if r.n == 0 && cfg.damping == 0.0 && cfg.mode == PopularityMode::Damped {
            // undefined mean: unrated items pass on an undamped filter
            true
        } else {
            stats.score(item, cfg)? >= cfg.threshold
        };
        if ok {
            pass.insert(item);
        }
    }
    Ok(pass)
}

/// Hybrid score per item: `(item, content score, passes filter)` in matrix
/// column order, plus the content fallback flag.
pub fn hybrid_scores(
    state: &PreferenceState,
    m: &ContentMatrices,
    stats: &PopularityStats,
    cfg: &PopularityConfig,
    weights: ContentWeights,
) -> Result<(Vec<(ItemId, f64, bool)>, bool)> {
    let (scores, fallback) = content_scores(state, m, weights)?;
    let pass = popularity_prefilter(&m.item_ids, stats, cfg)?;
    Ok((
        m.item_ids
            .iter()
            .zip(scores)
            .map(|(&i, s)| (i, s, pass.contains(&i)))
            .collect(),
        fallback,
    ))
}

/// Ranks hybrid triples: survivors by content score, then backfill from
/// filtered items in content order. Kept out of `recommend_hybrid` so the
/// ensemble can rank a restricted candidate set the same way.
pub fn rank_hybrid(scored: Vec<(ItemId, f64, bool)>, n: usize) -> Vec<Recommendation> {
    let (mut pass, mut rest): (Vec<_>, Vec<_>) = scored.into_iter().partition(|t| t.2);
    let strip = |v: &mut Vec<(ItemId, f64, bool)>| {
        let mut pairs: Vec<(ItemId, f64)> = v.drain(..).map(|(i, s, _)| (i, s)).collect();
        pairs.sort_by(by_score_then_id);
        pairs
    };
    let pass = strip(&mut pass);
    let rest = strip(&mut rest);
    pass.into_iter()
        .map(|(i, s)| Recommendation::new(i, s))
        .chain(rest.into_iter().map(|(i, s)| Recommendation {
            backfilled: true,
            ..Recommendation::new(i, s)
        }))
        .take(n)
        .collect()
}

/// Cascade: popularity filter, then content ranking of the survivors.
pub fn recommend_hybrid(
    state: &PreferenceState,
    m: &ContentMatrices,
    stats: &PopularityStats,
    n: usize,
    cfg: &PopularityConfig,
    weights: ContentWeights,
) -> Result<RecList> {
    let (scored, fallback) = hybrid_scores(state, m, stats, cfg, weights)?;
    Ok(RecList {
        items: rank_hybrid(scored, n),
        fallback,
        diagnostic: None,
    })
}
