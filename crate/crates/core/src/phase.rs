//! Maturity tracking, per-phase recommender weights and the score
//! aggregation that merges active recommenders into one list.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rec::{by_score_then_id, RecList, Recommendation, RecommenderKind};
use crate::{Error, ItemId, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaturityState {
    pub user_count: usize,
    pub rating_count: usize,
    pub item_count: usize,
    pub phase: u8,
}

impl MaturityState {
    pub fn new(user_count: usize, rating_count: usize, item_count: usize) -> Self {
        MaturityState {
            user_count,
            rating_count,
            item_count,
            phase: 1,
        }
    }

    /// `ratings / (users × items)`, 0 for an empty matrix.
    pub fn density(&self) -> f64 {
        let cells = self.user_count * self.item_count;
        if cells == 0 {
            0.0
        } else {
            (self.rating_count as f64 / cells as f64).min(1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights3 {
    pub hybrid: f64,
    pub demographic: f64,
    pub collaborative: f64,
}

impl Weights3 {
    pub const fn new(hybrid: f64, demographic: f64, collaborative: f64) -> Self {
        Weights3 {
            hybrid,
            demographic,
            collaborative,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        let v = [self.hybrid, self.demographic, self.collaborative];
        if v.iter().any(|w| !(*w >= 0.0)) || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "{what} weights must be non-negative and sum to 1"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Per-recommender min-max normalization, then weighted sum.
    MinMax,
    /// Weighted Borda count over each recommender's ranking.
    Borda,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseConfig {
    pub p2_min_ratings: usize,
    pub p3_min_users: usize,
    pub p3_min_ratings: usize,
    pub p4_min_users: usize,
    pub p4_min_density: f64,
    /// Phase 3 (hybrid, demographic); collaborative must be 0.
    pub p3_weights: Weights3,
    pub p4_entry_weights: Weights3,
    pub p4_cap_weights: Weights3,
    pub aggregation: Aggregation,
}

impl Default for PhaseConfig {
    fn default() -> Self {
        PhaseConfig {
            p2_min_ratings: 1,
            p3_min_users: 150,
            p3_min_ratings: 150,
            p4_min_users: 225,
            p4_min_density: 0.025,
            p3_weights: Weights3::new(0.5, 0.5, 0.0),
            p4_entry_weights: Weights3::new(0.35, 0.35, 0.30),
            p4_cap_weights: Weights3::new(0.25, 0.25, 0.50),
            aggregation: Aggregation::MinMax,
        }
    }
}

impl PhaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p4_min_users < self.p3_min_users {
            return Err(Error::InvalidArgument(
                "phase-4 user trigger below phase-3 trigger".into(),
            ));
        }
        if !(self.p4_min_density > 0.0 && self.p4_min_density <= 1.0) {
            return Err(Error::InvalidArgument(
                "phase-4 density trigger outside (0, 1]".into(),
            ));
        }
        self.p3_weights.validate("phase-3")?;
        if self.p3_weights.collaborative != 0.0 {
            return Err(Error::InvalidArgument(
                "phase-3 weights cannot include the collaborative model".into(),
            ));
        }
        self.p4_entry_weights.validate("phase-4 entry")?;
        self.p4_cap_weights.validate("phase-4 cap")
    }
}

/// Highest phase whose trigger is met, never below `previous`.
pub fn determine_phase(stats: &MaturityState, previous: u8, cfg: &PhaseConfig) -> u8 {
    let reached = if stats.user_count >= cfg.p4_min_users && stats.density() >= cfg.p4_min_density {
        4
    } else if stats.user_count >= cfg.p3_min_users && stats.rating_count >= cfg.p3_min_ratings {
        3
    } else if stats.rating_count >= cfg.p2_min_ratings {
        2
    } else {
        1
    };
    reached.max(previous).max(1)
}

/// Recommenders that run in a phase.
pub fn active_recommenders(phase: u8) -> &'static [RecommenderKind] {
    use RecommenderKind::*;
    match phase {
        0 | 1 => &[Content],
        2 => &[Hybrid],
        3 => &[Hybrid, Demographic],
        _ => &[Hybrid, Demographic, Collaborative],
    }
}

/// Member weights for a phase. In phase 4 the weights move linearly from the
/// entry vector to the cap vector as density goes from the trigger to twice
/// the trigger.
pub fn update_weights(phase: u8, stats: &MaturityState, cfg: &PhaseConfig) -> Vec<(RecommenderKind, f64)> {
    use RecommenderKind::*;
    match phase {
        0 | 1 => vec![(Content, 1.0)],
        2 => vec![(Hybrid, 1.0)],
        3 => vec![
            (Hybrid, cfg.p3_weights.hybrid),
            (Demographic, cfg.p3_weights.demographic),
        ],
        _ => {
            let t = ((stats.density() - cfg.p4_min_density) / cfg.p4_min_density).clamp(0.0, 1.0);
            let (a, b) = (cfg.p4_entry_weights, cfg.p4_cap_weights);
            let lerp = |x: f64, y: f64| x + t * (y - x);
            let mut w = [
                lerp(a.hybrid, b.hybrid),
                lerp(a.demographic, b.demographic),
                lerp(a.collaborative, b.collaborative),
            ];
            let total: f64 = w.iter().sum();
            for x in w.iter_mut() {
                *x /= total;
            }
            vec![(Hybrid, w[0]), (Demographic, w[1]), (Collaborative, w[2])]
        }
    }
}

/// One recommender's scores over the candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberScores {
    pub kind: RecommenderKind,
    pub weight: f64,
    pub scores: Vec<(ItemId, f64)>,
    /// Items placed only to keep the list full (popularity backfill).
    pub backfilled: Vec<ItemId>,
    pub fallback: bool,
    /// The member produced nothing (untrained, no neighbours, ...).
    pub empty: bool,
}

impl MemberScores {
    pub fn new(kind: RecommenderKind, weight: f64, scores: Vec<(ItemId, f64)>) -> Self {
        let empty = scores.is_empty();
        MemberScores {
            kind,
            weight,
            scores,
            backfilled: Vec::new(),
            fallback: false,
            empty,
        }
    }
}

fn normalized(scores: &[(ItemId, f64)], mode: Aggregation) -> BTreeMap<ItemId, f64> {
    match mode {
        Aggregation::MinMax => {
            let lo = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
            let hi = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
            let span = hi - lo;
            scores
                .iter()
                .map(|&(i, s)| (i, if span > 0.0 { (s - lo) / span } else { 0.0 }))
                .collect()
        }
        Aggregation::Borda => {
            let mut ranked = scores.to_vec();
            ranked.sort_by(by_score_then_id);
            let n = ranked.len();
            ranked
                .into_iter()
                .enumerate()
                .map(|(r, (i, _))| (i, if n > 1 { (n - 1 - r) as f64 / (n - 1) as f64 } else { 0.0 }))
                .collect()
        }
    }
}

/// Weighted merge of member scores; items a member did not score count as 0
/// for it. `factors` (context multipliers) restrict and scale candidates.
/// Provenance lists the members whose own top-N contained the item.
pub fn aggregate(
    members: Vec<MemberScores>,
    factors: Option<&BTreeMap<ItemId, f64>>,
    n: usize,
    mode: Aggregation,
) -> RecList {
    let live: Vec<MemberScores> = members.into_iter().filter(|m| !m.empty && m.weight > 0.0).collect();
    if live.is_empty() {
        return RecList::empty_with("no active recommender produced output");
    }
    let total: f64 = live.iter().map(|m| m.weight).sum();
    let keep = |i: &ItemId| factors.is_none_or(|f| f.contains_key(i));
    let factor = |i: &ItemId| factors.and_then(|f| f.get(i)).copied().unwrap_or(1.0);
    let fallback = live.iter().any(|m| m.fallback);

    let mut provenance: BTreeMap<ItemId, Vec<RecommenderKind>> = BTreeMap::new();
    for m in &live {
        let mut own: Vec<(ItemId, f64)> = m
            .scores
            .iter()
            .filter(|(i, _)| keep(i))
            .map(|&(i, s)| (i, s * factor(&i)))
            .collect();
        own.sort_by(by_score_then_id);
        for (i, _) in own.into_iter().take(n) {
            provenance.entry(i).or_default().push(m.kind);
        }
    }

    let final_scores: Vec<(ItemId, f64)> = if live.len() == 1 {
        // a lone member keeps its raw scores
        live[0].scores.iter().filter(|(i, _)| keep(i)).map(|&(i, s)| (i, s * factor(&i))).collect()
    } else {
        let mut acc: BTreeMap<ItemId, f64> = BTreeMap::new();
        for m in &live {
            let norm = normalized(&m.scores, mode);
            for (i, s) in norm {
                *acc.entry(i).or_default() += m.weight / total * s;
            }
        }
        acc.into_iter().filter(|(i, _)| keep(i)).map(|(i, s)| (i, s * factor(&i))).collect()
    };
    let mut ranked = final_scores;
    ranked.sort_by(by_score_then_id);
    ranked.truncate(n);
    let backfilled = |i: &ItemId| live.len() == 1 && live[0].backfilled.contains(i);
    RecList {
        items: ranked
            .into_iter()
            .map(|(i, s)| Recommendation {
                backfilled: backfilled(&i),
                sources: provenance.remove(&i).unwrap_or_default(),
                ..Recommendation::new(i, s)
            })
            .collect(),
        fallback,
        diagnostic: None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use RecommenderKind::*;

    fn stats(u: usize, r: usize) -> MaturityState {
        MaturityState::new(u, r, 29)
    }

    #[test]
    fn milestone_phases() {
        let cfg = PhaseConfig::default();
        assert_eq!(determine_phase(&stats(98, 0), 1, &cfg), 1);
        assert_eq!(determine_phase(&stats(98, 64), 1, &cfg), 2);
        assert_eq!(determine_phase(&stats(198, 191), 2, &cfg), 3);
        assert_eq!(determine_phase(&stats(250, 191), 3, &cfg), 4);
        // ratchet
        assert_eq!(determine_phase(&stats(98, 0), 3, &cfg), 3);
    }

    #[test]
    fn weight_ramp_endpoints_and_midpoint() {
        let cfg = PhaseConfig::default();
        let at = |density: f64| {
            let users = 1000;
            let r = (density * (users * 29) as f64).round() as usize;
            update_weights(4, &stats(users, r), &cfg)
        };
        let close = |w: Vec<(RecommenderKind, f64)>, e: [f64; 3]| {
            for ((_, a), b) in w.iter().zip(e) {
                assert!((a - b).abs() < 1e-3, "{w:?} vs {e:?}");
            }
        };
        close(at(0.025), [0.35, 0.35, 0.30]);
        close(at(0.05), [0.25, 0.25, 0.50]);
        close(at(0.2), [0.25, 0.25, 0.50]);
        close(at(0.0375), [0.30, 0.30, 0.40]);
    }

    #[test]
    fn hand_aggregation() {
        // hybrid: a=1.0 b=0.5 c=0.0 -> norm 1, .5, 0
        // demog:  a=0.0 b=2.0 c=4.0 -> norm 0, .5, 1
        // weights .3/.7: a=.3, b=.5, c=.7
        let members = vec![
            MemberScores::new(Hybrid, 0.3, vec![(ItemId(0), 1.0), (ItemId(1), 0.5), (ItemId(2), 0.0)]),
            MemberScores::new(Demographic, 0.7, vec![(ItemId(0), 0.0), (ItemId(1), 2.0), (ItemId(2), 4.0)]),
        ];
        let out = aggregate(members, None, 3, Aggregation::MinMax);
        assert_eq!(out.item_ids(), vec![ItemId(2), ItemId(1), ItemId(0)]);
        let s: Vec<f64> = out.items.iter().map(|r| r.score).collect();
        for (a, b) in s.iter().zip([0.7, 0.5, 0.3]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_members_are_dropped_and_renormalized() {
        let members = vec![
            MemberScores::new(Hybrid, 0.5, vec![(ItemId(0), 1.0), (ItemId(1), 0.2)]),
            MemberScores::new(Demographic, 0.5, vec![]),
        ];
        let out = aggregate(members, None, 2, Aggregation::MinMax);
        assert_eq!(out.item_ids(), vec![ItemId(0), ItemId(1)]);
        assert_eq!(out.items[0].score, 1.0);
        let none = aggregate(vec![MemberScores::new(Hybrid, 1.0, vec![])], None, 2, Aggregation::MinMax);
        assert!(none.is_empty() && none.diagnostic.is_some());
    }

    #[test]
    fn degenerate_weights_follow_one_member() {
        let h = vec![(ItemId(0), 0.2), (ItemId(1), 0.9), (ItemId(2), 0.5)];
        let members = vec![
            MemberScores::new(Hybrid, 1.0, h.clone()),
            MemberScores::new(Demographic, 0.0, vec![(ItemId(0), 9.0)]),
            MemberScores::new(Collaborative, 0.0, vec![(ItemId(0), 9.0)]),
        ];
        let out = aggregate(members, None, 3, Aggregation::MinMax);
        assert_eq!(out.item_ids(), vec![ItemId(1), ItemId(2), ItemId(0)]);
        assert_eq!(out.items[0].score, 0.9);
    }

    #[test]
    fn borda_ranks() {
        let members = vec![
            MemberScores::new(Hybrid, 0.5, vec![(ItemId(0), 10.0), (ItemId(1), 5.0), (ItemId(2), 1.0)]),
            MemberScores::new(Demographic, 0.5, vec![(ItemId(0), 0.1), (ItemId(1), 0.3), (ItemId(2), 0.2)]),
        ];
        let out = aggregate(members, None, 3, Aggregation::Borda);
        // borda: 0 -> (1+0)/2, 1 -> (.5+1)/2, 2 -> (0+.5)/2
        assert_eq!(out.item_ids(), vec![ItemId(1), ItemId(0), ItemId(2)]);
    }

    #[test]
    fn context_factors_scale_and_cut() {
        let members = vec![
            MemberScores::new(Hybrid, 0.5, vec![(ItemId(0), 1.0), (ItemId(1), 0.5), (ItemId(2), 0.0)]),
            MemberScores::new(Demographic, 0.5, vec![(ItemId(0), 1.0), (ItemId(1), 0.5), (ItemId(2), 0.0)]),
        ];
        let factors: BTreeMap<ItemId, f64> = [(ItemId(1), 1.0), (ItemId(2), 1.0)].into();
        let out = aggregate(members, Some(&factors), 3, Aggregation::MinMax);
        assert_eq!(out.item_ids(), vec![ItemId(1), ItemId(2)]);
        assert_eq!(out.items[0].sources, vec![Hybrid, Demographic]);
    }

    #[test]
    fn config_validation() {
        assert!(PhaseConfig::default().validate().is_ok());
        let bad = PhaseConfig { p4_min_users: 10, ..Default::default() };
        assert!(bad.validate().is_err());
        let bad = PhaseConfig { p3_weights: Weights3::new(0.5, 0.6, 0.0), ..Default::default() };
        assert!(bad.validate().is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn weights_stay_on_simplex(users in 1usize..5000, ratings in 0usize..100_000) {
                let s = stats(users, ratings);
                let w = update_weights(4, &s, &PhaseConfig::default());
                prop_assert!(w.iter().all(|(_, x)| *x >= 0.0));
                prop_assert!((w.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-12);
            }

            #[test]
            fn scaling_one_member_keeps_order(
                a in prop::collection::vec(0.0f64..10.0, 6),
                b in prop::collection::vec(0.0f64..10.0, 6),
                c in 0.01f64..100.0,
            ) {
                let mk = |scale: f64| vec![
                    MemberScores::new(Hybrid, 0.4, a.iter().enumerate().map(|(i, s)| (ItemId(i as u32), s * scale)).collect()),
                    MemberScores::new(Demographic, 0.6, b.iter().enumerate().map(|(i, s)| (ItemId(i as u32), *s)).collect()),
                ];
                let x = aggregate(mk(1.0), None, 6, Aggregation::MinMax);
                let y = aggregate(mk(c), None, 6, Aggregation::MinMax);
                for (p, q) in x.items.iter().zip(&y.items) {
                    prop_assert!((p.score - q.score).abs() < 1e-9);
                }
            }

            #[test]
            fn phase_never_decreases(steps in prop::collection::vec((0usize..400, 0usize..800), 1..20)) {
                let cfg = PhaseConfig::default();
                let mut phase = 1;
                let (mut u, mut r) = (0, 0);
                for (du, dr) in steps {
                    u += du;
                    r += dr;
                    let next = determine_phase(&stats(u, r), phase, &cfg);
                    prop_assert!(next >= phase);
                    phase = next;
                }
            }
        }
    }
}
