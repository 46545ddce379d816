//! Seeded synthetic users, latent category preferences and sparse ratings.
//!
//! Every user draws from its own ChaCha stream, so the first `n` users of a
//! larger run are identical to an `n`-user run with the same seed.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::demographic::{
    UserRecord, GENDERS, GROUP_COMPS, JOBS, NOMINAL_ATTRS, ORDINAL_ATTRS, ORDINAL_LEVELS, REGIONS,
};
use crate::ontology::{ItemRecord, OntologyGraph};
use crate::{Error, ItemId, Result, UserId};

/// The ten latent preference categories, in column order.
pub const PREF_CATEGORIES: [&str; 10] = [
    "Beach",
    "Relax",
    "Shop",
    "Nightlife",
    "Theme park",
    "Gastro",
    "Sports",
    "Culture",
    "Nature",
    "Events",
];

pub const DEFAULT_SPARSITY: f64 = 0.0225;
pub const DEFAULT_SIGMA: f64 = 0.5;

// stream purposes, mixed into the per-user stream id
const STREAM_DEMOGRAPHICS: u64 = 0;
const STREAM_RATINGS: u64 = 1;
const STREAM_COEFFICIENTS: u64 = u64::MAX;

fn stream_rng(seed: u64, user: u32, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(if purpose == STREAM_COEFFICIENTS {
        purpose
    } else {
        (u64::from(user) << 2) | purpose
    });
    rng
}

/// Level probabilities per attribute, in level-code order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Marginals {
    pub attrs: BTreeMap<String, Vec<f64>>,
}

impl Default for Marginals {
    fn default() -> Self {
        let uniform = |n: usize| vec![1.0 / n as f64; n];
        let mut attrs = BTreeMap::new();
        for (a, &levels) in ORDINAL_ATTRS.iter().zip(&ORDINAL_LEVELS) {
            attrs.insert(a.to_string(), uniform(levels as usize));
        }
        for (a, n) in NOMINAL_ATTRS
            .iter()
            .zip([GENDERS.len(), JOBS.len(), REGIONS.len(), GROUP_COMPS.len()])
        {
            attrs.insert(a.to_string(), uniform(n));
        }
        Marginals { attrs }
    }
}

impl Marginals {
    pub fn validate(&self) -> Result<()> {
        let expected: Vec<(&str, usize)> = ORDINAL_ATTRS
            .iter()
            .zip(ORDINAL_LEVELS)
            .map(|(a, l)| (*a, l as usize))
            .chain(
                NOMINAL_ATTRS
                    .iter()
                    .zip([GENDERS.len(), JOBS.len(), REGIONS.len(), GROUP_COMPS.len()])
                    .map(|(a, n)| (*a, n)),
            )
            .collect();
        for (attr, levels) in expected {
            let p = self
                .attrs
                .get(attr)
                .ok_or_else(|| Error::InvalidArgument(format!("no marginal for {attr}")))?;
            if p.len() != levels {
                return Err(Error::DimensionMismatch {
                    what: "marginal",
                    expected: levels,
                    got: p.len(),
                });
            }
            let sum: f64 = p.iter().sum();
            if p.iter().any(|x| !(*x >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!(
                    "marginal for {attr} must be non-negative and sum to 1 (sums to {sum})"
                )));
            }
        }
        Ok(())
    }

    fn sample(&self, attr: &str, rng: &mut ChaCha8Rng) -> usize {
        let p = &self.attrs[attr];
        let mut u: f64 = rng.random();
        for (i, &x) in p.iter().enumerate() {
            if u < x {
                return i;
            }
            u -= x;
        }
        p.iter().rposition(|&x| x > 0.0).unwrap_or(0)
    }
}

/// Logit coefficients: `attr=level` → one weight per preference category.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientTable {
    pub rows: BTreeMap<String, [f64; 10]>,
}

fn all_attribute_levels() -> Vec<String> {
    let mut keys = Vec::new();
    for (a, &levels) in ORDINAL_ATTRS.iter().zip(&ORDINAL_LEVELS) {
        keys.extend((1..=levels).map(|l| format!("{a}={l}")));
    }
    for (a, vocab) in NOMINAL_ATTRS
        .iter()
        .zip([&GENDERS[..], &JOBS[..], &REGIONS[..], &GROUP_COMPS[..]])
    {
        keys.extend(vocab.iter().map(|v| format!("{a}={v}")));
    }
    keys
}

impl CoefficientTable {
    /// Standard-normal coefficients drawn from a dedicated stream.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = stream_rng(seed, 0, STREAM_COEFFICIENTS);
        let rows = all_attribute_levels()
            .into_iter()
            .map(|k| {
                let mut row = [0.0; 10];
                for x in row.iter_mut() {
                    *x = StandardNormal.sample(&mut rng);
                }
                (k, row)
            })
            .collect();
        CoefficientTable { rows }
    }

    pub fn zeros() -> Self {
        CoefficientTable {
            rows: all_attribute_levels().into_iter().map(|k| (k, [0.0; 10])).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_users: usize,
    pub seed: u64,
    pub marginals: Marginals,
    /// `None` draws a seeded standard-normal table.
    pub coefficients: Option<CoefficientTable>,
    pub sparsity: f64,
    pub sigma: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_users: 98,
            seed: 7,
            marginals: Marginals::default(),
            coefficients: None,
            sparsity: DEFAULT_SPARSITY,
            sigma: DEFAULT_SIGMA,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        self.marginals.validate()?;
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "sparsity {} outside (0, 1]",
                self.sparsity
            )));
        }
        if !(self.sigma >= 0.0) {
            return Err(Error::InvalidArgument("sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn coefficient_table(&self) -> CoefficientTable {
        self.coefficients
            .clone()
            .unwrap_or_else(|| CoefficientTable::seeded(self.seed))
    }
}

/// One synthetic user with id `id`.
pub fn gen_user(cfg: &GenConfig, id: u32) -> UserRecord {
    let mut rng = stream_rng(cfg.seed, id, STREAM_DEMOGRAPHICS);
    let m = &cfg.marginals;
    let ord = |attr: &str, rng: &mut ChaCha8Rng| m.sample(attr, rng) as u8 + 1;
    let age = ord("age", &mut rng);
    let ac_deg = ord("ac_deg", &mut rng);
    let budget = ord("budget", &mut rng);
    let accom = ord("accom", &mut rng);
    UserRecord {
        id: UserId(id),
        age,
        ac_deg,
        budget,
        accom,
        gender: GENDERS[m.sample("gender", &mut rng)].into(),
        job: JOBS[m.sample("job", &mut rng)].into(),
        region: REGIONS[m.sample("region", &mut rng)].into(),
        group_comp: GROUP_COMPS[m.sample("group_comp", &mut rng)].into(),
    }
}

pub fn gen_users(cfg: &GenConfig) -> Result<Vec<UserRecord>> {
    cfg.validate()?;
    Ok((0..cfg.n_users as u32).map(|id| gen_user(cfg, id)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentPrefRow {
    pub user: UserId,
    pub probs: [f64; 10],
}

/// Softmax of summed coefficients, computed with the max subtracted.
pub fn latent_prefs(user: &UserRecord, table: &CoefficientTable) -> Result<LatentPrefRow> {
    let mut utility = [0.0; 10];
    for (attr, level) in user.attribute_levels() {
        let key = format!("{attr}={level}");
        let row = table
            .rows
            .get(&key)
            .ok_or_else(|| Error::InvalidArgument(format!("no coefficients for level `{key}`")))?;
        for (u, c) in utility.iter_mut().zip(row) {
            *u += c;
        }
    }
    let max = utility.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = utility.iter().map(|u| (u - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    let mut probs = [0.0; 10];
    for (p, e) in probs.iter_mut().zip(&exp) {
        *p = e / total;
    }
    Ok(LatentPrefRow { user: user.id, probs })
}

pub fn gen_latent_prefs(users: &[UserRecord], cfg: &GenConfig) -> Result<Vec<LatentPrefRow>> {
    let table = cfg.coefficient_table();
    users.iter().map(|u| latent_prefs(u, &table)).collect()
}

/// Preference mass of an ontology label: a latent category counts for
/// itself and for each of its HL parents.
pub fn category_mass(prefs: &[f64; 10], label: &str, graph: &OntologyGraph) -> f64 {
    PREF_CATEGORIES
        .iter()
        .zip(prefs)
        .filter(|(c, _)| **c == label || graph.hl_parents(c).contains(&label))
        .map(|(_, p)| *p)
        .sum()
}

/// Labels an item is described by: its category list, or else the HL
/// classes its links reach.
pub fn item_category_labels<'a>(item: &'a ItemRecord, graph: &'a OntologyGraph) -> Vec<&'a str> {
    match &item.categories {
        Some(c) if !c.is_empty() => c.iter().map(String::as_str).collect(),
        _ => graph.item_hl_classes(item.id).into_iter().collect(),
    }
}

/// Mean preference mass over the item's categories.
pub fn affinity(prefs: &[f64; 10], item: &ItemRecord, graph: &OntologyGraph) -> f64 {
    let labels = item_category_labels(item, graph);
    if labels.is_empty() {
        return 0.0;
    }
    labels.iter().map(|l| category_mass(prefs, l, graph)).sum::<f64>() / labels.len() as f64
}

/// Average-rank percentile in [0, 1] (ties share their mean rank).
pub fn rank_percentiles(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    if n <= 1 {
        return vec![1.0; n];
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mean_rank = (i + j) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mean_rank / (n - 1) as f64;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rating {
    pub user: UserId,
    pub item: ItemId,
    pub rating: f64,
}

/// Full noisy rating row of one user over the catalog, in catalog order.
pub fn user_rating_row(pref: &LatentPrefRow, graph: &OntologyGraph, cfg: &GenConfig) -> Vec<(ItemId, f64, f64)> {
    let mut rng = stream_rng(cfg.seed, pref.user.0, STREAM_RATINGS);
    let items = graph.items();
    let aff: Vec<f64> = items.iter().map(|i| affinity(&pref.probs, i, graph)).collect();
    let pct = rank_percentiles(&aff);
    let noise = Normal::new(0.0, cfg.sigma).expect("sigma validated");
    items
        .iter()
        .zip(pct)
        .map(|(item, p)| {
            let draw: f64 = rng.random();
            let eps = if cfg.sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            let r = (1.0 + 4.0 * p + eps).clamp(1.0, 5.0);
            (item.id, (r * 100.0).round() / 100.0, draw)
        })
        .collect()
}

/// Sparse ratings: each (user, item) pair is kept with probability
/// `cfg.sparsity`.
pub fn gen_ratings(prefs: &[LatentPrefRow], graph: &OntologyGraph, cfg: &GenConfig) -> Result<Vec<Rating>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for pref in prefs {
        for (item, rating, draw) in user_rating_row(pref, graph, cfg) {
            if draw < cfg.sparsity {
                out.push(Rating {
                    user: pref.user,
                    item,
                    rating,
                });
            }
        }
    }
    Ok(out)
}

/// HL selection a synthetic user would tick: classes whose preference mass
/// is at least half of the strongest one.
pub fn hl_selection(pref: &LatentPrefRow, graph: &OntologyGraph) -> Vec<f64> {
    let mass: Vec<f64> = graph
        .hl_classes()
        .map(|h| category_mass(&pref.probs, h, graph))
        .collect();
    let max = mass.iter().copied().fold(0.0, f64::max);
    mass.iter()
        .map(|&m| if max > 0.0 && m >= 0.5 * max { 1.0 } else { 0.0 })
        .collect()
}

pub fn write_prefs_csv(rows: &[LatentPrefRow], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["UserID".to_string()];
    header.extend(PREF_CATEGORIES.iter().map(|c| c.to_string()));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.user.to_string()];
        rec.extend(r.probs.iter().map(|p| format!("{p:.6}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ratings_csv(ratings: &[Rating], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["userid", "itemid", "rating"])?;
    for r in ratings {
        w.write_record([r.user.to_string(), r.item.to_string(), format!("{:.2}", r.rating)])?;
    }
    w.flush()?;
    Ok(())
}

/// Users × items matrix with `0.00` for unrated cells.
pub fn write_dense_csv(users: &[UserId], items: &[ItemId], ratings: &[Rating], out: impl Write) -> Result<()> {
    let lookup: BTreeMap<(UserId, ItemId), f64> =
        ratings.iter().map(|r| ((r.user, r.item), r.rating)).collect();
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["userid".to_string()];
    header.extend(items.iter().map(ToString::to_string));
    w.write_record(&header)?;
    for u in users {
        let mut rec = vec![u.to_string()];
        rec.extend(
            items
                .iter()
                .map(|i| format!("{:.2}", lookup.get(&(*u, *i)).copied().unwrap_or(0.0))),
        );
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_items_jsonl(items: &[ItemRecord], mut out: impl Write) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut out, item)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_items_jsonl(text: &str) -> Result<Vec<ItemRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// The 29-item catalog with its category lists.
pub fn load_item_fixture() -> Vec<ItemRecord> {
    OntologyGraph::fixture().items().to_vec()
}
