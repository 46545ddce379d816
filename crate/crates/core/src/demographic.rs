//! Demographic recommender: user schema, mixed Manhattan/Jaccard distance,
//! K-Prototypes clustering with knee-selected k, and inverse-distance kNN
//! inside the user's cluster.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::preferences::{rating_signal, FeedbackEvent, FeedbackKind};
use crate::rec::{top_n, RecList, Recommendation};
use crate::{Error, ItemId, Result, UserId};

pub const AGE_BINS: [&str; 5] = ["18-30", "31-40", "41-50", "51-60", "60+"];
pub const AC_DEG_LEVELS: [&str; 4] = ["None", "High School", "Some College", "College Degree"];
pub const BUDGET_LEVELS: [&str; 3] = ["Low", "Mid", "High"];
pub const ACCOM_LEVELS: [&str; 4] = ["Single", "Double", "Suite", "Villa"];
pub const GENDERS: [&str; 2] = ["Male", "Female"];
pub const JOBS: [&str; 2] = ["blue collar", "white collar"];
pub const REGIONS: [&str; 8] = [
    "South Europe",
    "North Europe",
    "East Europe",
    "North America",
    "South America",
    "Asia",
    "Africa",
    "Middle East",
];
pub const GROUP_COMPS: [&str; 4] = ["1Adlt", "2Adlt", "2Adlt+Child", "GrpFriends"];
const GROUP_COMP_LONG: [&str; 4] = ["1 Adult", "2 Adults", "2 Adults + Child", "Group of Friends"];

/// Names of the ordinal attributes, in record order.
pub const ORDINAL_ATTRS: [&str; 4] = ["age", "ac_deg", "budget", "accom"];
/// Names of the nominal attributes, in record order.
pub const NOMINAL_ATTRS: [&str; 4] = ["gender", "job", "region", "group_comp"];
/// Number of levels of each ordinal attribute (codes are 1-based).
pub const ORDINAL_LEVELS: [u8; 4] = [5, 4, 3, 4];

pub const USERS_CSV_HEADER: [&str; 9] = [
    "UserID", "Age", "AcDeg", "Budget", "Accom", "Gender", "Job", "Region", "GroupComp",
];

pub const DEFAULT_K_NN: usize = 10;
pub const DEFAULT_EPSILON: f64 = 1e-6;
pub const MAX_ITERATIONS: usize = 100;

/// Demographics of one user. Ordinals are 1-based level codes, nominals
/// canonical labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserRecord {
    pub id: UserId,
    pub age: u8,
    pub ac_deg: u8,
    pub budget: u8,
    pub accom: u8,
    pub gender: String,
    pub job: String,
    pub region: String,
    pub group_comp: String,
}

/// Raw years → 1-based age bin. Values 1..=5 are taken as bins already.
pub fn age_code(value: u32) -> Result<u8> {
    match value {
        1..=5 => Ok(value as u8),
        18..=30 => Ok(1),
        31..=40 => Ok(2),
        41..=50 => Ok(3),
        51..=60 => Ok(4),
        61..=130 => Ok(5),
        _ => Err(Error::InvalidArgument(format!(
            "age {value} is neither a bin code (1-5) nor an adult age"
        ))),
    }
}

fn canonical(value: &str, vocab: &[&'static str], aliases: &[&'static str], attr: &str) -> Result<String> {
    let v = value.trim();
    if let Some(i) = vocab.iter().position(|x| x.eq_ignore_ascii_case(v)) {
        return Ok(vocab[i].to_string());
    }
    if let Some(i) = aliases.iter().position(|x| x.eq_ignore_ascii_case(v)) {
        return Ok(vocab[i].to_string());
    }
    Err(Error::InvalidArgument(format!(
        "{attr} `{v}` not in {vocab:?}"
    )))
}

impl UserRecord {
    /// Builds a record, binning raw ages and canonicalizing labels.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        id: u32,
        age: u32,
        ac_deg: u8,
        budget: u8,
        accom: u8,
        gender: &str,
        job: &str,
        region: &str,
        group_comp: &str,
    ) -> Result<UserRecord> {
        let mut u = UserRecord {
            id: UserId(id),
            age: age_code(age)?,
            ac_deg,
            budget,
            accom,
            gender: gender.into(),
            job: job.into(),
            region: region.into(),
            group_comp: group_comp.into(),
        };
        u.normalize()?;
        Ok(u)
    }

    /// Checks level ranges and rewrites nominal labels to canonical form.
    pub fn normalize(&mut self) -> Result<()> {
        for (i, (&code, &levels)) in self.ordinals_u8().iter().zip(&ORDINAL_LEVELS).enumerate() {
            if code < 1 || code > levels {
                return Err(Error::InvalidArgument(format!(
                    "{} code {code} outside 1..={levels}",
                    ORDINAL_ATTRS[i]
                )));
            }
        }
        self.gender = canonical(&self.gender, &GENDERS, &[], "gender")?;
        self.job = canonical(&self.job, &JOBS, &[], "job")?;
        self.region = canonical(&self.region, &REGIONS, &[], "region")?;
        self.group_comp = canonical(&self.group_comp, &GROUP_COMPS, &GROUP_COMP_LONG, "group_comp")?;
        Ok(())
    }

    fn ordinals_u8(&self) -> [u8; 4] {
        [self.age, self.ac_deg, self.budget, self.accom]
    }

    pub fn ordinals(&self) -> [f64; 4] {
        self.ordinals_u8().map(f64::from)
    }

    pub fn nominals(&self) -> [&str; 4] {
        [&self.gender, &self.job, &self.region, &self.group_comp]
    }

    /// `(attribute, level)` pairs for all nine attributes.
    pub fn attribute_levels(&self) -> Vec<(&'static str, String)> {
        let mut out: Vec<(&'static str, String)> = ORDINAL_ATTRS
            .iter()
            .zip(self.ordinals_u8())
            .map(|(a, c)| (*a, c.to_string()))
            .collect();
        out.extend(
            NOMINAL_ATTRS
                .iter()
                .zip(self.nominals())
                .map(|(a, v)| (*a, v.to_string())),
        );
        out
    }
}

pub fn write_users_csv(users: &[UserRecord], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(USERS_CSV_HEADER)?;
    for u in users {
        w.write_record([
            u.id.to_string(),
            u.age.to_string(),
            u.ac_deg.to_string(),
            u.budget.to_string(),
            u.accom.to_string(),
            u.gender.clone(),
            u.job.clone(),
            u.region.clone(),
            u.group_comp.clone(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_users_csv(input: impl Read) -> Result<Vec<UserRecord>> {
    let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(input);
    let mut users = Vec::new();
    for (idx, row) in r.records().enumerate() {
        let row = row?;
        let line = idx + 2;
        let field = |i: usize| -> Result<&str> {
            row.get(i).ok_or_else(|| Error::Parse {
                line,
                message: format!("missing column {}", USERS_CSV_HEADER[i]),
            })
        };
        let num = |i: usize| -> Result<u32> {
            let raw = field(i)?;
            raw.parse().map_err(|_| Error::Parse {
                line,
                message: format!("{} `{raw}` is not an integer", USERS_CSV_HEADER[i]),
            })
        };
        let small = |i: usize| -> Result<u8> {
            u8::try_from(num(i)?).map_err(|_| Error::Parse {
                line,
                message: format!("{} out of range", USERS_CSV_HEADER[i]),
            })
        };
        let user = UserRecord::new(
            num(0)?,
            num(1)?,
            small(2)?,
            small(3)?,
            small(4)?,
            field(5)?,
            field(6)?,
            field(7)?,
            field(8)?,
        )
        .map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        users.push(user);
    }
    Ok(users)
}

/// Weights of the Manhattan (ordinal) and Jaccard (nominal) parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixedDistanceSchema {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for MixedDistanceSchema {
    fn default() -> Self {
        MixedDistanceSchema { alpha: 0.5, beta: 0.5 }
    }
}

impl MixedDistanceSchema {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if alpha < 0.0 || beta < 0.0 || ((alpha + beta) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "alpha {alpha} and beta {beta} must be non-negative and sum to 1"
            )));
        }
        Ok(MixedDistanceSchema { alpha, beta })
    }
}

/// `α·mean(|Δordinal|/range) + β·Jaccard(attribute=value sets)`, in [0, 1].
pub fn mixed_distance(u: &UserRecord, v: &UserRecord, schema: &MixedDistanceSchema) -> f64 {
    let manhattan: f64 = u
        .ordinals()
        .iter()
        .zip(v.ordinals())
        .zip(ORDINAL_LEVELS)
        .map(|((a, b), levels)| (a - b).abs() / f64::from(levels - 1))
        .sum::<f64>()
        / ORDINAL_LEVELS.len() as f64;
    let shared = u
        .nominals()
        .iter()
        .zip(v.nominals())
        .filter(|(a, b)| **a == *b)
        .count();
    // each user contributes one attribute=value token per nominal attribute
    let union = 2 * NOMINAL_ATTRS.len() - shared;
    let jaccard = 1.0 - shared as f64 / union as f64;
    schema.alpha * manhattan + schema.beta * jaccard
}

/// Code of each nominal value within its vocabulary.
fn nominal_codes(u: &UserRecord) -> [u8; 4] {
    let idx = |v: &str, vocab: &[&str]| vocab.iter().position(|x| *x == v).unwrap_or(0) as u8;
    [
        idx(&u.gender, &GENDERS),
        idx(&u.job, &JOBS),
        idx(&u.region, &REGIONS),
        idx(&u.group_comp, &GROUP_COMPS),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    /// Categorical weight; `None` uses the standard-deviation heuristic.
    pub gamma: Option<f64>,
    pub seed: u64,
    /// Independent initializations; the lowest final cost wins.
    pub n_init: usize,
    pub max_iter: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            gamma: None,
            seed: 0,
            n_init: 4,
            max_iter: MAX_ITERATIONS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    /// Numeric prototype coordinates in standardized space.
    pub numeric_prototypes: Vec<[f64; 4]>,
    pub nominal_prototypes: Vec<[u8; 4]>,
    pub assignments: BTreeMap<UserId, usize>,
    pub gamma: f64,
    pub cost: f64,
    /// Cost after every assignment step of the winning run.
    pub cost_history: Vec<f64>,
    pub means: [f64; 4],
    pub stds: [f64; 4],
}

struct Standardized {
    numeric: Vec<[f64; 4]>,
    nominal: Vec<[u8; 4]>,
    means: [f64; 4],
    stds: [f64; 4],
}

fn standardize(users: &[&UserRecord]) -> Standardized {
    let n = users.len() as f64;
    let mut means = [0.0; 4];
    for u in users {
        for (m, x) in means.iter_mut().zip(u.ordinals()) {
            *m += x / n;
        }
    }
    let mut stds = [0.0; 4];
    for u in users {
        for ((s, x), m) in stds.iter_mut().zip(u.ordinals()).zip(means) {
            *s += (x - m).powi(2) / n;
        }
    }
    stds.iter_mut().for_each(|s| *s = s.sqrt());
    let numeric = users
        .iter()
        .map(|u| scale(&u.ordinals(), &means, &stds))
        .collect();
    let nominal = users.iter().map(|u| nominal_codes(u)).collect();
    Standardized {
        numeric,
        nominal,
        means,
        stds,
    }
}

fn scale(x: &[f64; 4], means: &[f64; 4], stds: &[f64; 4]) -> [f64; 4] {
    let mut out = [0.0; 4];
    for i in 0..4 {
        // a constant column carries no information
        out[i] = if stds[i] > 0.0 { (x[i] - means[i]) / stds[i] } else { 0.0 };
    }
    out
}

fn point_cost(num: &[f64; 4], nom: &[u8; 4], pnum: &[f64; 4], pnom: &[u8; 4], gamma: f64) -> f64 {
    let sq: f64 = num.iter().zip(pnum).map(|(a, b)| (a - b).powi(2)).sum();
    let mismatches = nom.iter().zip(pnom).filter(|(a, b)| a != b).count() as f64;
    sq + gamma * mismatches
}

/// Nearest prototype; ties go to the lowest cluster index.
fn nearest(num: &[f64; 4], nom: &[u8; 4], pn: &[[f64; 4]], pc: &[[u8; 4]], gamma: f64) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for c in 0..pn.len() {
        let d = point_cost(num, nom, &pn[c], &pc[c], gamma);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// `0.5 × mean standard deviation` of the standardized numeric columns.
fn default_gamma(data: &Standardized) -> f64 {
    let n = data.numeric.len() as f64;
    let mut total = 0.0;
    for col in 0..4 {
        let mean = data.numeric.iter().map(|r| r[col]).sum::<f64>() / n;
        let var = data.numeric.iter().map(|r| (r[col] - mean).powi(2)).sum::<f64>() / n;
        total += var.sqrt();
    }
    0.5 * total / 4.0
}

struct RunResult {
    numeric: Vec<[f64; 4]>,
    nominal: Vec<[u8; 4]>,
    labels: Vec<usize>,
    cost: f64,
    history: Vec<f64>,
}

fn run_once(data: &Standardized, k: usize, gamma: f64, max_iter: usize, rng: &mut ChaCha8Rng) -> RunResult {
    let n = data.numeric.len();
    // k-means++ seeding under the mixed cost
    let mut centers = vec![rng.random_range(0..n)];
    while centers.len() < k {
        let d2: Vec<f64> = (0..n)
            .map(|i| {
                centers
                    .iter()
                    .map(|&c| {
                        point_cost(&data.numeric[i], &data.nominal[i], &data.numeric[c], &data.nominal[c], gamma)
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            (0..n).find(|i| !centers.contains(i)).unwrap_or(0)
        };
        centers.push(next);
    }
    let mut pn: Vec<[f64; 4]> = centers.iter().map(|&c| data.numeric[c]).collect();
    let mut pc: Vec<[u8; 4]> = centers.iter().map(|&c| data.nominal[c]).collect();
    let mut labels = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..max_iter.max(1) {
        let mut changed = false;
        let mut cost = 0.0;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, d) = nearest(&data.numeric[i], &data.nominal[i], &pn, &pc, gamma);
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
            dists[i] = d;
            cost += d;
        }
        history.push(cost);
        if !changed && history.len() > 1 {
            break;
        }
        update_prototypes(data, k, &labels, &mut pn, &mut pc);
        // empty clusters take the point that is worst served right now
        for c in 0..k {
            if labels.iter().all(|&l| l != c) {
                let far = (0..n)
                    .filter(|&i| !pn.iter().zip(&pc).any(|(a, b)| *a == data.numeric[i] && *b == data.nominal[i]))
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
                if let Some(i) = far {
                    pn[c] = data.numeric[i];
                    pc[c] = data.nominal[i];
                    dists[i] = 0.0;
                }
            }
        }
    }
    let cost = *history.last().unwrap_or(&0.0);
    RunResult {
        numeric: pn,
        nominal: pc,
        labels,
        cost,
        history,
    }
}

fn update_prototypes(data: &Standardized, k: usize, labels: &[usize], pn: &mut [[f64; 4]], pc: &mut [[u8; 4]]) {
    for c in 0..k {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let mut mean = [0.0; 4];
        for &i in &members {
            for (m, x) in mean.iter_mut().zip(data.numeric[i]) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= members.len() as f64);
        pn[c] = mean;
        for attr in 0..4 {
            let mut counts: BTreeMap<u8, usize> = BTreeMap::new();
            for &i in &members {
                *counts.entry(data.nominal[i][attr]).or_default() += 1;
            }
            // most frequent, lowest code on ties
            let (code, _) = counts
                .iter()
                .fold((0u8, 0usize), |best, (&code, &cnt)| if cnt > best.1 { (code, cnt) } else { best });
            pc[c][attr] = code;
        }
    }
}

/// Fits K-Prototypes. Users are processed in id order so input order does
/// not matter.
pub fn kprototypes_fit(users: &[UserRecord], k: usize, cfg: &ClusterConfig) -> Result<ClusterModel> {
    if users.is_empty() {
        return Err(Error::InvalidArgument("cannot cluster zero users".into()));
    }
    if k == 0 || k > users.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} must be in 1..={}",
            users.len()
        )));
    }
    let mut sorted: Vec<&UserRecord> = users.iter().collect();
    sorted.sort_by_key(|u| u.id);
    if sorted.windows(2).any(|w| w[0].id == w[1].id) {
        return Err(Error::InvalidArgument("duplicate user ids".into()));
    }
    let data = standardize(&sorted);
    let gamma = match cfg.gamma {
        Some(g) if g >= 0.0 => g,
        Some(g) => return Err(Error::InvalidArgument(format!("gamma {g} must be >= 0"))),
        None => default_gamma(&data),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<RunResult> = None;
    for _ in 0..cfg.n_init.max(1) {
        let run = run_once(&data, k, gamma, cfg.max_iter, &mut rng);
        if best.as_ref().is_none_or(|b| run.cost < b.cost) {
            best = Some(run);
        }
    }
    let best = best.expect("at least one run");
    Ok(ClusterModel {
        k,
        numeric_prototypes: best.numeric,
        nominal_prototypes: best.nominal,
        assignments: sorted.iter().map(|u| u.id).zip(best.labels).collect(),
        gamma,
        cost: best.cost,
        cost_history: best.history,
        means: data.means,
        stds: data.stds,
    })
}

impl ClusterModel {
    /// Cluster of a known user, or the nearest prototype for a new one.
    pub fn assign(&self, user: &UserRecord) -> usize {
        if let Some(&c) = self.assignments.get(&user.id) {
            return c;
        }
        let num = scale(&user.ordinals(), &self.means, &self.stds);
        nearest(&num, &nominal_codes(user), &self.numeric_prototypes, &self.nominal_prototypes, self.gamma).0
    }

    pub fn members(&self, cluster: usize) -> Vec<UserId> {
        self.assignments
            .iter()
            .filter(|(_, &c)| c == cluster)
            .map(|(u, _)| *u)
            .collect()
    }
}

/// Index of the knee: the point farthest below the chord joining the first
/// and last cost. Ties and curves with nothing below the chord give 0.
pub fn knee_index(costs: &[f64]) -> usize {
    let n = costs.len();
    if n < 3 {
        return 0;
    }
    let (y0, y1) = (costs[0], costs[n - 1]);
    let span = (n - 1) as f64;
    let scale = costs.iter().fold(0.0f64, |m, c| m.max(c.abs())).max(1.0);
    let mut best = (0, 0.0);
    for (i, &c) in costs.iter().enumerate() {
        let chord = y0 + (y1 - y0) * i as f64 / span;
        let below = chord - c;
        if below > best.1 + 1e-12 * scale {
            best = (i, below);
        }
    }
    best.0
}

/// Fits every k in `k_min..=k_max` and returns the knee of the cost curve
/// together with the costs.
pub fn choose_k(users: &[UserRecord], k_min: usize, k_max: usize, cfg: &ClusterConfig) -> Result<(usize, Vec<f64>)> {
    if k_min == 0 || k_min > k_max || k_max > users.len() {
        return Err(Error::InvalidArgument(format!(
            "k range {k_min}..={k_max} invalid for {} users",
            users.len()
        )));
    }
    let costs = (k_min..=k_max)
        .map(|k| kprototypes_fit(users, k, cfg).map(|m| m.cost))
        .collect::<Result<Vec<_>>>()?;
    Ok((k_min + knee_index(&costs), costs))
}

/// What one user said about one item.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Opinion {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rating: Option<f64>,
    /// Latest implicit signal (book/bookmark/dismiss).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub implicit: Option<f64>,
    #[serde(default)]
    pub booked: bool,
    #[serde(default)]
    pub dismissed: bool,
}

impl Opinion {
    /// Ratings override implicit signals.
    pub fn signal(&self) -> Option<f64> {
        self.rating.map(rating_signal).or(self.implicit)
    }
}

/// Per-user feedback, keyed by item.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Opinions {
    pub items: BTreeMap<ItemId, Opinion>,
}

impl Opinions {
    pub fn record(&mut self, event: &FeedbackEvent) {
        let o = self.items.entry(event.item).or_default();
        match event.kind {
            FeedbackKind::Rate => o.rating = event.rating,
            kind => {
                o.implicit = Some(event.signal());
                o.booked |= kind == FeedbackKind::Book;
                o.dismissed = kind == FeedbackKind::Dismiss;
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.items.values().all(|o| o.signal().is_none())
    }

    pub fn signal(&self, item: ItemId) -> Option<f64> {
        self.items.get(&item).and_then(Opinion::signal)
    }

    /// Items rated or booked.
    pub fn consumed(&self) -> BTreeSet<ItemId> {
        self.items
            .iter()
            .filter(|(_, o)| o.booked || o.rating.is_some())
            .map(|(i, _)| *i)
            .collect()
    }

    pub fn dismissed(&self) -> BTreeSet<ItemId> {
        self.items
            .iter()
            .filter(|(_, o)| o.dismissed)
            .map(|(i, _)| *i)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnPrediction {
    /// Items with at least one neighbour opinion; others score 0.
    pub scores: BTreeMap<ItemId, f64>,
    /// Neighbours used, nearest first, with their distances.
    pub neighbours: Vec<(UserId, f64)>,
}

impl KnnPrediction {
    pub fn is_empty(&self) -> bool {
        self.neighbours.is_empty()
    }
}

/// Inverse-distance weighted mean of neighbour signals,
/// `w = 1 / (d + ε)`, over the `k_nn` nearest members with feedback.
pub fn knn_predict(
    target: &UserRecord,
    members: &[(&UserRecord, &Opinions)],
    k_nn: usize,
    schema: &MixedDistanceSchema,
    epsilon: f64,
) -> KnnPrediction {
    let mut candidates: Vec<(f64, UserId, &Opinions)> = members
        .iter()
        .filter(|(u, o)| u.id != target.id && !o.is_empty())
        .map(|(u, o)| (mixed_distance(target, u, schema), u.id, *o))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    candidates.truncate(k_nn);
    let weighted: Vec<(f64, &Opinions)> = candidates.iter().map(|(d, _, o)| (*d, *o)).collect();
    KnnPrediction {
        scores: inverse_distance_scores(&weighted, epsilon),
        neighbours: candidates.iter().map(|(d, u, _)| (*u, *d)).collect(),
    }
}

/// Per item, `Σ w·s / Σ w` with `w = 1 / (d + ε)` over the neighbours that
/// have an opinion on it.
pub fn inverse_distance_scores(neighbours: &[(f64, &Opinions)], epsilon: f64) -> BTreeMap<ItemId, f64> {
    let mut num: BTreeMap<ItemId, f64> = BTreeMap::new();
    let mut den: BTreeMap<ItemId, f64> = BTreeMap::new();
    for (d, opinions) in neighbours {
        let w = 1.0 / (d + epsilon);
        for (item, o) in &opinions.items {
            if let Some(s) = o.signal() {
                *num.entry(*item).or_default() += w * s;
                *den.entry(*item).or_default() += w;
            }
        }
    }
    num.into_iter().map(|(i, s)| (i, s / den[&i])).collect()
}

/// Top-N catalog items by kNN score, skipping what the target already
/// consumed. Empty (and flagged) when no neighbour has feedback.
pub fn recommend_demographic(
    prediction: &KnnPrediction,
    catalog: &[ItemId],
    exclude: &BTreeSet<ItemId>,
    n: usize,
) -> RecList {
    if prediction.is_empty() {
        return RecList::empty_with("no cluster neighbour has feedback yet");
    }
    let scored = catalog
        .iter()
        .filter(|i| !exclude.contains(i))
        .map(|i| (*i, prediction.scores.get(i).copied().unwrap_or(0.0)))
        .collect();
    RecList {
        items: top_n(scored, n)
            .into_iter()
            .map(|(i, s)| Recommendation::new(i, s))
            .collect(),
        fallback: false,
        diagnostic: None,
    }
}
