//! Offline evaluation: MAP@K, MAR@K, coverage, personalization, HL/LL
//! diversity and novelty over per-user recommendation lists.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;

use serde::{Deserialize, Serialize};

use crate::ontology::OntologyGraph;
use crate::{Error, ItemId, Result, UserId};

/// Held-out ratings at or above this value count as relevant. FFM labels
/// use the same cut.
pub const RELEVANCE_THRESHOLD: f64 = 3.0;

pub const CSV_HEADER: [&str; 7] = [
    "MAP@K",
    "MAR@K",
    "Coverage",
    "Personalization",
    "Diversity HL",
    "Diversity LL",
    "Novelty",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallConvention {
    /// `(1/m)·Σ r_u(k)·rel_u(k)`.
    #[default]
    RecallWeighted,
    /// `(1/m)·Σ P_u(k)·rel_u(k)`, as computed by the `recmetrics` package.
    PrecisionWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserEval {
    pub user: UserId,
    /// Recommended items, best first.
    pub recs: Vec<ItemId>,
    pub relevant: BTreeSet<ItemId>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub users: Vec<UserEval>,
    /// Items available for recommendation (coverage denominator).
    pub train_items: BTreeSet<ItemId>,
    /// Number of users that consumed each item.
    pub counts: BTreeMap<ItemId, usize>,
    /// User population for novelty; `None` uses `users.len()`.
    pub population: Option<usize>,
}

impl EvalSet {
    pub fn population(&self) -> usize {
        self.population.unwrap_or(self.users.len())
    }

    fn require_users(&self) -> Result<()> {
        if self.users.is_empty() {
            return Err(Error::InvalidArgument("evaluation set has no users".into()));
        }
        Ok(())
    }
}

/// `(P_u(k), r_u(k), m == 0)`.
pub fn precision_recall_at_k(list: &[ItemId], relevant: &BTreeSet<ItemId>, k: usize) -> (f64, f64, bool) {
    if relevant.is_empty() || k == 0 {
        return (0.0, 0.0, relevant.is_empty());
    }
    let hits = list.iter().take(k).filter(|i| relevant.contains(i)).count() as f64;
    (hits / k as f64, hits / relevant.len() as f64, false)
}

fn average_precision(u: &UserEval, k: usize) -> f64 {
    let m = u.relevant.len();
    if m == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, item) in u.recs.iter().take(k).enumerate() {
        if u.relevant.contains(item) {
            hits += 1;
            total += hits as f64 / (pos + 1) as f64;
        }
    }
    total / m.min(k) as f64
}

fn average_recall(u: &UserEval, k: usize, convention: RecallConvention) -> f64 {
    let m = u.relevant.len();
    if m == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut total = 0.0;
    for (pos, item) in u.recs.iter().take(k).enumerate() {
        if u.relevant.contains(item) {
            hits += 1;
            total += match convention {
                RecallConvention::RecallWeighted => hits as f64 / m as f64,
                RecallConvention::PrecisionWeighted => hits as f64 / (pos + 1) as f64,
            };
        }
    }
    total / m as f64
}

pub fn map_at_k(set: &EvalSet, k: usize) -> Result<f64> {
    set.require_users()?;
    check_k(k)?;
    Ok(set.users.iter().map(|u| average_precision(u, k)).sum::<f64>() / set.users.len() as f64)
}

pub fn mar_at_k(set: &EvalSet, k: usize, convention: RecallConvention) -> Result<f64> {
    set.require_users()?;
    check_k(k)?;
    Ok(set
        .users
        .iter()
        .map(|u| average_recall(u, k, convention))
        .sum::<f64>()
        / set.users.len() as f64)
}

fn check_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidArgument("K must be >= 1".into()));
    }
    Ok(())
}

/// Fraction of training items recommended to at least one user.
pub fn coverage(set: &EvalSet) -> Result<f64> {
    if set.train_items.is_empty() {
        return Err(Error::InvalidArgument("training item set is empty".into()));
    }
    let recommended: BTreeSet<ItemId> = set
        .users
        .iter()
        .flat_map(|u| u.recs.iter().copied())
        .filter(|i| set.train_items.contains(i))
        .collect();
    Ok(recommended.len() as f64 / set.train_items.len() as f64)
}

fn set_cosine(a: &BTreeSet<ItemId>, b: &BTreeSet<ItemId>) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    a.intersection(b).count() as f64 / ((a.len() * b.len()) as f64).sqrt()
}

/// `1 - mean upper-triangle cosine` between binary-encoded user lists.
pub fn personalization(set: &EvalSet) -> Result<f64> {
    let n = set.users.len();
    if n < 2 {
        return Err(Error::InvalidArgument(
            "personalization needs at least two users".into(),
        ));
    }
    let lists: Vec<BTreeSet<ItemId>> = set
        .users
        .iter()
        .map(|u| u.recs.iter().copied().collect())
        .collect();
    let mut total = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            total += set_cosine(&lists[i], &lists[j]);
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(1.0 - total / pairs)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// One-hot item features over HL or LL classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureLevel {
    Hl,
    Ll,
}

pub fn item_features(graph: &OntologyGraph, level: FeatureLevel) -> BTreeMap<ItemId, Vec<f64>> {
    let labels: Vec<&str> = match level {
        FeatureLevel::Hl => graph.hl_classes().collect(),
        FeatureLevel::Ll => graph.ll_classes().collect(),
    };
    graph
        .item_ids()
        .into_iter()
        .map(|id| {
            let on: BTreeSet<&str> = match level {
                FeatureLevel::Hl => graph.item_hl_classes(id),
                FeatureLevel::Ll => graph.item_classes(id).into_iter().collect(),
            };
            let row = labels
                .iter()
                .map(|l| if on.contains(l) { 1.0 } else { 0.0 })
                .collect();
            (id, row)
        })
        .collect()
}

/// `(1 - ils, users whose list had fewer than two items)`.
pub fn diversity(set: &EvalSet, features: &BTreeMap<ItemId, Vec<f64>>) -> Result<(f64, usize)> {
    set.require_users()?;
    let mut ils_total = 0.0;
    let mut short = 0usize;
    for u in &set.users {
        let rows: Vec<&Vec<f64>> = u
            .recs
            .iter()
            .map(|i| {
                features.get(i).ok_or_else(|| {
                    Error::InvalidArgument(format!("item {i} has no feature row"))
                })
            })
            .collect::<Result<_>>()?;
        if rows.len() < 2 {
            short += 1;
            continue;
        }
        let mut sum = 0.0;
        let mut pairs = 0usize;
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                sum += cosine(rows[i], rows[j]);
                pairs += 1;
            }
        }
        ils_total += sum / pairs as f64;
    }
    Ok((1.0 - ils_total / set.users.len() as f64, short))
}

/// Mean self-information `-log2(count(i)/|U|)` of recommended items;
/// unconsumed items count as consumed once.
pub fn novelty(set: &EvalSet) -> Result<f64> {
    set.require_users()?;
    let pop = set.population();
    if pop == 0 {
        return Err(Error::InvalidArgument("user population is zero".into()));
    }
    let mut total = 0.0;
    for u in &set.users {
        if u.recs.is_empty() {
            continue;
        }
        let s: f64 = u
            .recs
            .iter()
            .map(|i| {
                let c = set.counts.get(i).copied().unwrap_or(0).max(1);
                -(c as f64 / pop as f64).log2()
            })
            .sum();
        total += s / u.recs.len() as f64;
    }
    Ok(total / set.users.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_at_k: f64,
    pub mar_at_k: f64,
    pub coverage: f64,
    pub personalization: f64,
    pub diversity_hl: f64,
    pub diversity_ll: f64,
    pub novelty: f64,
    pub k: usize,
    /// Users with no relevant held-out item (counted, contribute 0).
    pub users_without_relevant: usize,
    /// Users whose list was too short for intra-list similarity.
    pub short_lists: usize,
}

impl EvalReport {
    pub fn values(&self) -> [f64; 7] {
        [
            self.map_at_k,
            self.mar_at_k,
            self.coverage,
            self.personalization,
            self.diversity_hl,
            self.diversity_ll,
            self.novelty,
        ]
    }

    /// One CSV row in header order, four decimals.
    pub fn csv_row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.4}"))
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Personalization is reported as 0 for single-user sets instead of failing.
pub fn evaluate(
    set: &EvalSet,
    k: usize,
    hl_features: &BTreeMap<ItemId, Vec<f64>>,
    ll_features: &BTreeMap<ItemId, Vec<f64>>,
) -> Result<EvalReport> {
    let (diversity_hl, short_lists) = diversity(set, hl_features)?;
    let (diversity_ll, _) = diversity(set, ll_features)?;
    Ok(EvalReport {
        map_at_k: map_at_k(set, k)?,
        mar_at_k: mar_at_k(set, k, RecallConvention::RecallWeighted)?,
        coverage: coverage(set)?,
        personalization: if set.users.len() < 2 {
            0.0
        } else {
            personalization(set)?
        },
        diversity_hl,
        diversity_ll,
        novelty: novelty(set)?,
        k,
        users_without_relevant: set.users.iter().filter(|u| u.relevant.is_empty()).count(),
        short_lists,
    })
}

/// Reads `userid,itemid` rows (rank order within each user).
pub fn read_recs_csv(reader: impl Read) -> Result<BTreeMap<UserId, Vec<ItemId>>> {
    let mut out: BTreeMap<UserId, Vec<ItemId>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for (idx, row) in rdr.records().enumerate() {
        let row = row?;
        let line = idx + 2;
        let user = parse_field::<u32>(&row, 0, line)?;
        let item = parse_field::<u32>(&row, 1, line)?;
        out.entry(UserId(user)).or_default().push(ItemId(item));
    }
    Ok(out)
}

/// Reads `userid,itemid,rating` rows.
pub fn read_ratings_csv(reader: impl Read) -> Result<Vec<(UserId, ItemId, f64)>> {
    let mut out = Vec::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for (idx, row) in rdr.records().enumerate() {
        let row = row?;
        let line = idx + 2;
        out.push((
            UserId(parse_field(&row, 0, line)?),
            ItemId(parse_field(&row, 1, line)?),
            parse_field(&row, 2, line)?,
        ));
    }
    Ok(out)
}

fn parse_field<T: std::str::FromStr>(row: &csv::StringRecord, col: usize, line: usize) -> Result<T> {
    let raw = row.get(col).ok_or_else(|| Error::Parse {
        line,
        message: format!("missing column {}", col + 1),
    })?;
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("cannot parse `{raw}` in column {}", col + 1),
    })
}
