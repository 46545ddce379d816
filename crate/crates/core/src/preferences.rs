//! Per-user preference vectors over HL classes, LL classes and items, the
//! content recommender built on them, and trickle-up feedback.

use serde::{Deserialize, Serialize};

use crate::ontology::{ContentMatrices, OntologyGraph};
use crate::rec::{top_n, RecList, Recommendation};
use crate::{Error, ItemId, Result, UserId};

pub const DEFAULT_ETA_LL: f64 = 0.2;
pub const DEFAULT_ETA_HL: f64 = 0.05;
/// LL value used for every class when a user has no non-zero preference.
pub const FALLBACK_LL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Book,
    Bookmark,
    Dismiss,
    Rate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub user: UserId,
    pub item: ItemId,
    pub kind: FeedbackKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    #[serde(default)]
    pub timestamp: i64,
}

impl FeedbackEvent {
    pub fn new(user: UserId, item: ItemId, kind: FeedbackKind) -> Self {
        FeedbackEvent {
            user,
            item,
            kind,
            rating: None,
            timestamp: 0,
        }
    }

    pub fn rate(user: UserId, item: ItemId, rating: f64) -> Self {
        FeedbackEvent {
            rating: Some(rating),
            ..FeedbackEvent::new(user, item, FeedbackKind::Rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.kind, self.rating) {
            (FeedbackKind::Rate, Some(r)) if (0.0..=5.0).contains(&r) => Ok(()),
            (FeedbackKind::Rate, Some(r)) => Err(Error::InvalidArgument(format!(
                "rating {r} outside [0, 5]"
            ))),
            (FeedbackKind::Rate, None) => {
                Err(Error::InvalidArgument("rate event without rating".into()))
            }
            (_, Some(_)) => Err(Error::InvalidArgument(
                "only rate events carry a rating".into(),
            )),
            (_, None) => Ok(()),
        }
    }

    /// Feedback signal in [-1, 1].
    pub fn signal(&self) -> f64 {
        match self.kind {
            FeedbackKind::Book => 1.0,
            FeedbackKind::Bookmark => 0.5,
            FeedbackKind::Dismiss => -1.0,
            FeedbackKind::Rate => rating_signal(self.rating.unwrap_or(3.0)),
        }
    }
}

/// Maps a 0–5 rating onto [-1, 1] with 3 as neutral.
pub fn rating_signal(rating: f64) -> f64 {
    ((rating - 3.0) / 2.0).clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContentWeights {
    pub w_hl: f64,
    pub w_ll: f64,
}

impl Default for ContentWeights {
    fn default() -> Self {
        ContentWeights { w_hl: 0.3, w_ll: 0.7 }
    }
}

impl ContentWeights {
    pub const HL_ONLY: ContentWeights = ContentWeights { w_hl: 1.0, w_ll: 0.0 };

    pub fn new(w_hl: f64, w_ll: f64) -> Result<Self> {
        let w = ContentWeights { w_hl, w_ll };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_hl < 0.0 || self.w_ll < 0.0 || ((self.w_hl + self.w_ll) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "content weights ({}, {}) must be non-negative and sum to 1",
                self.w_hl, self.w_ll
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreferenceConfig {
    pub eta_ll: f64,
    pub eta_hl: f64,
    pub weights: ContentWeights,
}

impl Default for PreferenceConfig {
    fn default() -> Self {
        PreferenceConfig {
            eta_ll: DEFAULT_ETA_LL,
            eta_hl: DEFAULT_ETA_HL,
            weights: ContentWeights::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceState {
    pub user: UserId,
    pub p_hl: Vec<f64>,
    pub p_ll: Vec<f64>,
    /// Item scores propagated from `p_ll`; recomputed on every change.
    pub p_item: Vec<f64>,
    /// At least one feedback event has been applied.
    pub has_feedback: bool,
    pub updated_at: i64,
}

/// Divides by the maximum component when it is positive.
pub fn normalize_max(v: &mut [f64]) {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
}

fn all_zero(v: &[f64]) -> bool {
    v.iter().all(|&x| x == 0.0)
}

/// `normalize(p_hlᵀ · hl_ll)`.
pub fn propagate_hl(p_hl: &[f64], m: &ContentMatrices) -> Result<Vec<f64>> {
    check_len("p_hl", p_hl, m.hl_labels.len())?;
    let mut p_ll = m.hl_ll.left_multiply(p_hl);
    normalize_max(&mut p_ll);
    Ok(p_ll)
}

/// Item scores from an LL vector: each item takes the mean of its linked
/// classes' values, then the vector is max-normalized. Unlinked items
/// score 0.
pub fn propagate_ll(p_ll: &[f64], m: &ContentMatrices) -> Result<Vec<f64>> {
    check_len("p_ll", p_ll, m.ll_labels.len())?;
    let sums = m.ll_item.left_multiply(p_ll);
    let counts = m.ll_item.col_sums();
    let mut p_item: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { 0.0 } else { s / c as f64 })
        .collect();
    normalize_max(&mut p_item);
    Ok(p_item)
}

fn check_len(what: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// LL vector with the uniform fallback substituted for an all-zero one.
fn effective_ll(p_ll: &[f64]) -> (Vec<f64>, bool) {
    if all_zero(p_ll) {
        (vec![FALLBACK_LL; p_ll.len()], true)
    } else {
        (p_ll.to_vec(), false)
    }
}

pub fn init_preferences(
    user: UserId,
    hl_selection: &[f64],
    m: &ContentMatrices,
) -> Result<PreferenceState> {
    check_len("hl_selection", hl_selection, m.hl_labels.len())?;
    if let Some(x) = hl_selection.iter().find(|x| !(0.0..=1.0).contains(*x)) {
        return Err(Error::InvalidArgument(format!(
            "HL selection component {x} outside [0, 1]"
        )));
    }
    let p_hl = hl_selection.to_vec();
    let (p_ll, p_item) = propagate_down(&p_hl, m)?;
    Ok(PreferenceState {
        user,
        p_hl,
        p_ll,
        p_item,
        has_feedback: false,
        updated_at: 0,
    })
}

/// `(p_ll, p_item)` derived from an HL vector.
pub fn propagate_down(p_hl: &[f64], m: &ContentMatrices) -> Result<(Vec<f64>, Vec<f64>)> {
    let p_ll = propagate_hl(p_hl, m)?;
    let p_item = propagate_ll(&effective_ll(&p_ll).0, m)?;
    Ok((p_ll, p_item))
}

impl PreferenceState {
    /// Recomputes the item cache after the catalog grew.
    pub fn refresh(&mut self, m: &ContentMatrices) -> Result<()> {
        check_len("p_hl", &self.p_hl, m.hl_labels.len())?;
        self.p_item = propagate_ll(&effective_ll(&self.p_ll).0, m)?;
        Ok(())
    }

    /// True when scoring falls back to the uniform LL vector.
    pub fn is_fallback(&self) -> bool {
        all_zero(&self.p_ll)
    }
}

/// Per-item content scores in matrix column order, plus the fallback flag.
pub fn content_scores(
    state: &PreferenceState,
    m: &ContentMatrices,
    weights: ContentWeights,
) -> Result<(Vec<f64>, bool)> {
    weights.validate()?;
    check_len("p_hl", &state.p_hl, m.hl_labels.len())?;
    check_len("p_ll", &state.p_ll, m.ll_labels.len())?;
    let weights = if state.has_feedback {
        weights
    } else {
        ContentWeights::HL_ONLY
    };
    let (hl_ll, fb_hl) = effective_ll(&propagate_hl(&state.p_hl, m)?);
    let from_hl = propagate_ll(&hl_ll, m)?;
    let (ll, fb_ll) = effective_ll(&state.p_ll);
    let from_ll = propagate_ll(&ll, m)?;
    let scores = from_hl
        .iter()
        .zip(&from_ll)
        .map(|(h, l)| weights.w_hl * h + weights.w_ll * l)
        .collect();
    let fallback = (weights.w_hl > 0.0 && fb_hl) || (weights.w_ll > 0.0 && fb_ll);
    Ok((scores, fallback))
}

/// Top-N by content score; ties by ascending item id.
pub fn recommend_content(
    state: &PreferenceState,
    m: &ContentMatrices,
    n: usize,
    weights: ContentWeights,
) -> Result<RecList> {
    let (scores, fallback) = content_scores(state, m, weights)?;
    let scored = m.item_ids.iter().copied().zip(scores).collect();
    Ok(RecList {
        items: top_n(scored, n)
            .into_iter()
            .map(|(i, s)| Recommendation::new(i, s))
            .collect(),
        fallback,
        diagnostic: fallback.then(|| "no preferences yet; non-personalized ranking".into()),
    })
}

/// Trickle-up update: the item's LL classes move by `eta_ll·f`, their HL
/// parents by `eta_hl·f`, everything clamped to [0, 1].
pub fn apply_feedback(
    state: &mut PreferenceState,
    event: &FeedbackEvent,
    graph: &OntologyGraph,
    m: &ContentMatrices,
    cfg: &PreferenceConfig,
) -> Result<()> {
    event.validate()?;
    if event.user != state.user {
        return Err(Error::UnknownUser(event.user));
    }
    if graph.item(event.item).is_none() {
        return Err(Error::UnknownItem(event.item));
    }
    check_len("p_hl", &state.p_hl, m.hl_labels.len())?;
    check_len("p_ll", &state.p_ll, m.ll_labels.len())?;
    let f = event.signal();
    let mut hl_touched = vec![false; m.hl_labels.len()];
    for class in graph.item_classes(event.item) {
        let l = m
            .ll_index(class)
            .ok_or_else(|| Error::UnknownClass(class.to_string()))?;
        state.p_ll[l] = (state.p_ll[l] + cfg.eta_ll * f).clamp(0.0, 1.0);
        for h in m.hl_ll.col(l) {
            hl_touched[h] = true;
        }
    }
    for (h, touched) in hl_touched.into_iter().enumerate() {
        if touched {
            state.p_hl[h] = (state.p_hl[h] + cfg.eta_hl * f).clamp(0.0, 1.0);
        }
    }
    state.has_feedback = true;
    state.updated_at = state.updated_at.max(event.timestamp);
    state.refresh(m)
}
