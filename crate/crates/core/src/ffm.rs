//! Field-aware factorization machine: text data format, prediction,
//! AdaGrad training on logistic loss, feature encoding and ranking.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::context::Weather;
use crate::demographic::{Opinions, UserRecord};
use crate::metrics::RELEVANCE_THRESHOLD;
use crate::ontology::OntologyGraph;
use crate::rec::{top_n, RecList, Recommendation};
use crate::{Error, ItemId, Result, UserId};

pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FfmTriple {
    pub field: u32,
    pub feature: u32,
    pub value: f64,
}

impl FfmTriple {
    pub fn new(field: u32, feature: u32, value: f64) -> Self {
        FfmTriple { field, feature, value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfmExample {
    pub label: u8,
    pub triples: Vec<FfmTriple>,
    /// Negative drawn by sampling rather than observed.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub sampled: bool,
}

impl FfmExample {
    pub fn new(label: u8, triples: Vec<FfmTriple>) -> Self {
        FfmExample {
            label,
            triples,
            sampled: false,
        }
    }
}

/// Parses `label field:feature:value ...`. Column 0 is the label.
pub fn parse_ffm_line(text: &str) -> Result<FfmExample> {
    let mut tokens = text.split_whitespace();
    let label = match tokens.next() {
        Some("0") => 0,
        Some("1") => 1,
        Some(other) => {
            return Err(Error::FfmParse {
                column: 0,
                message: format!("label `{other}` is not 0 or 1"),
            })
        }
        None => {
            return Err(Error::FfmParse {
                column: 0,
                message: "empty line".into(),
            })
        }
    };
    let mut seen = HashSet::new();
    let mut triples = Vec::new();
    for (idx, tok) in tokens.enumerate() {
        let column = idx + 1;
        let bad = |message: String| Error::FfmParse { column, message };
        let parts: Vec<&str> = tok.split(':').collect();
        if parts.len() != 3 {
            return Err(bad(format!("`{tok}` is not field:feature:value")));
        }
        let field: u32 = parts[0].parse().map_err(|_| bad(format!("bad field `{}`", parts[0])))?;
        let feature: u32 = parts[1].parse().map_err(|_| bad(format!("bad feature `{}`", parts[1])))?;
        let value: f64 = parts[2].parse().map_err(|_| bad(format!("bad value `{}`", parts[2])))?;
        if !value.is_finite() {
            return Err(bad(format!("value `{}` is not finite", parts[2])));
        }
        if !seen.insert((field, feature)) {
            return Err(bad(format!("duplicate field/feature pair {field}:{feature}")));
        }
        triples.push(FfmTriple { field, feature, value });
    }
    Ok(FfmExample::new(label, triples))
}

pub fn format_ffm_line(example: &FfmExample) -> String {
    let mut out = example.label.to_string();
    for t in &example.triples {
        out.push_str(&format!(" {}:{}:{}", t.field, t.feature, t.value));
    }
    out
}

pub fn parse_ffm_dataset(text: &str) -> Result<Vec<FfmExample>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            parse_ffm_line(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(-y'·ŷ))` with `y' = ±1`, computed without overflow.
fn logloss(raw: f64, label: u8) -> f64 {
    let z = if label == 1 { raw } else { -raw };
    if z > 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FfmModel {
    pub version: u32,
    pub n_features: usize,
    pub n_fields: usize,
    pub d: usize,
    pub w0: f64,
    pub w: Vec<f64>,
    /// Latent table laid out as `[feature][field][k]`.
    pub v: Vec<f64>,
}

impl FfmModel {
    pub fn zeros(n_features: usize, n_fields: usize, d: usize) -> Result<FfmModel> {
        if d == 0 {
            return Err(Error::InvalidArgument("latent dimension must be >= 1".into()));
        }
        Ok(FfmModel {
            version: MODEL_FORMAT_VERSION,
            n_features,
            n_fields,
            d,
            w0: 0.0,
            w: vec![0.0; n_features],
            v: vec![0.0; n_features * n_fields * d],
        })
    }

    /// Offset of `v_{feature, field}`.
    pub fn v_offset(&self, feature: usize, field: usize) -> usize {
        (feature * self.n_fields + field) * self.d
    }

    pub fn latent(&self, feature: usize, field: usize) -> &[f64] {
        let o = self.v_offset(feature, field);
        &self.v[o..o + self.d]
    }

    pub fn latent_mut(&mut self, feature: usize, field: usize) -> &mut [f64] {
        let o = self.v_offset(feature, field);
        let d = self.d;
        &mut self.v[o..o + d]
    }

    fn check(&self, triples: &[FfmTriple]) -> Result<()> {
        for t in triples {
            if t.feature as usize >= self.n_features || t.field as usize >= self.n_fields {
                return Err(Error::InvalidArgument(format!(
                    "triple {}:{} outside model ({} fields, {} features)",
                    t.field, t.feature, self.n_fields, self.n_features
                )));
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.w0.is_finite() && self.w.iter().chain(&self.v).all(|x| x.is_finite())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<FfmModel> {
        let m: FfmModel = serde_json::from_str(text)?;
        if m.version != MODEL_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported model version {}",
                m.version
            )));
        }
        if m.w.len() != m.n_features {
            return Err(Error::DimensionMismatch {
                what: "linear weights",
                expected: m.n_features,
                got: m.w.len(),
            });
        }
        if m.v.len() != m.n_features * m.n_fields * m.d {
            return Err(Error::DimensionMismatch {
                what: "latent table",
                expected: m.n_features * m.n_fields * m.d,
                got: m.v.len(),
            });
        }
        Ok(m)
    }
}

fn raw_score(model: &FfmModel, triples: &[FfmTriple]) -> f64 {
    let mut y = model.w0;
    for t in triples {
        y += model.w[t.feature as usize] * t.value;
    }
    for (a, ti) in triples.iter().enumerate() {
        for tj in &triples[a + 1..] {
            let vi = model.latent(ti.feature as usize, tj.field as usize);
            let vj = model.latent(tj.feature as usize, ti.field as usize);
            let dot: f64 = vi.iter().zip(vj).map(|(x, y)| x * y).sum();
            y += dot * ti.value * tj.value;
        }
    }
    y
}

/// `(ŷ, σ(ŷ))` with
/// `ŷ = w0 + Σ w_i x_i + Σ_{i<j} ⟨v_{i,f(j)}, v_{j,f(i)}⟩ x_i x_j`.
pub fn ffm_predict(model: &FfmModel, triples: &[FfmTriple]) -> Result<(f64, f64)> {
    model.check(triples)?;
    let y = raw_score(model, triples);
    Ok((y, sigmoid(y)))
}

/// Logistic loss of one example plus `λ/2` times the squared norm of every
/// parameter the example touches (latent vectors once per pair).
pub fn example_loss(model: &FfmModel, ex: &FfmExample, lambda: f64) -> Result<f64> {
    model.check(&ex.triples)?;
    let mut reg = 0.0;
    for (a, ti) in ex.triples.iter().enumerate() {
        reg += model.w[ti.feature as usize].powi(2);
        for tj in &ex.triples[a + 1..] {
            let vi = model.latent(ti.feature as usize, tj.field as usize);
            let vj = model.latent(tj.feature as usize, ti.field as usize);
            reg += vi.iter().chain(vj).map(|x| x * x).sum::<f64>();
        }
    }
    Ok(logloss(raw_score(model, &ex.triples), ex.label) + 0.5 * lambda * reg)
}

/// Sparse gradient of [`example_loss`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradient {
    pub w0: f64,
    pub w: BTreeMap<usize, f64>,
    /// Keyed by `(feature, field)`.
    pub v: BTreeMap<(usize, usize), Vec<f64>>,
}

pub fn example_gradient(model: &FfmModel, ex: &FfmExample, lambda: f64) -> Result<Gradient> {
    model.check(&ex.triples)?;
    let y = raw_score(model, &ex.triples);
    let kappa = sigmoid(y) - f64::from(ex.label);
    let mut g = Gradient {
        w0: kappa,
        ..Gradient::default()
    };
    for t in &ex.triples {
        let i = t.feature as usize;
        *g.w.entry(i).or_default() += kappa * t.value + lambda * model.w[i];
    }
    for (a, ti) in ex.triples.iter().enumerate() {
        for tj in &ex.triples[a + 1..] {
            let (i, fi) = (ti.feature as usize, ti.field as usize);
            let (j, fj) = (tj.feature as usize, tj.field as usize);
            let xx = ti.value * tj.value;
            let vi = model.latent(i, fj).to_vec();
            let vj = model.latent(j, fi).to_vec();
            let gi = g.v.entry((i, fj)).or_insert_with(|| vec![0.0; model.d]);
            for k in 0..model.d {
                gi[k] += kappa * vj[k] * xx + lambda * vi[k];
            }
            let gj = g.v.entry((j, fi)).or_insert_with(|| vec![0.0; model.d]);
            for k in 0..model.d {
                gj[k] += kappa * vi[k] * xx + lambda * vj[k];
            }
        }
    }
    Ok(g)
}

/// Reusable buffers for [`sgd_step`].
#[derive(Default)]
struct Scratch {
    /// Per triple: index of the first triple with the same feature.
    canon: Vec<usize>,
    w_grad: Vec<f64>,
    /// `(canonical triple, field)` blocks of `d` entries.
    v_grad: Vec<f64>,
    v_touched: Vec<bool>,
}

/// One AdaGrad update with the same gradient as [`example_gradient`],
/// accumulated in flat buffers instead of maps.
#[allow(clippy::too_many_arguments)]
fn sgd_step(
    model: &mut FfmModel,
    ex: &FfmExample,
    lambda: f64,
    eta: f64,
    g_w0: &mut f64,
    g_w: &mut [f64],
    g_v: &mut [f64],
    s: &mut Scratch,
) {
    let (d, nf, t) = (model.d, model.n_fields, ex.triples.len());
    let kappa = sigmoid(raw_score(model, &ex.triples)) - f64::from(ex.label);
    s.canon.clear();
    for (a, ta) in ex.triples.iter().enumerate() {
        let first = ex.triples[..a].iter().position(|tb| tb.feature == ta.feature).unwrap_or(a);
        s.canon.push(first);
    }
    s.w_grad.clear();
    s.w_grad.resize(t, 0.0);
    s.v_grad.clear();
    s.v_grad.resize(t * nf * d, 0.0);
    s.v_touched.clear();
    s.v_touched.resize(t * nf, false);
    for (a, ta) in ex.triples.iter().enumerate() {
        s.w_grad[s.canon[a]] += kappa * ta.value + lambda * model.w[ta.feature as usize];
    }
    for (a, ti) in ex.triples.iter().enumerate() {
        for (b, tj) in ex.triples.iter().enumerate().skip(a + 1) {
            let oi = model.v_offset(ti.feature as usize, tj.field as usize);
            let oj = model.v_offset(tj.feature as usize, ti.field as usize);
            let xx = ti.value * tj.value;
            let si = s.canon[a] * nf + tj.field as usize;
            let sj = s.canon[b] * nf + ti.field as usize;
            for (slot, o, other) in [(si, oi, oj), (sj, oj, oi)] {
                s.v_touched[slot] = true;
                let g = &mut s.v_grad[slot * d..(slot + 1) * d];
                for c in 0..d {
                    g[c] += kappa * model.v[other + c] * xx + lambda * model.v[o + c];
                }
            }
        }
    }
    *g_w0 += kappa * kappa;
    model.w0 -= eta * kappa / g_w0.sqrt();
    for (a, ta) in ex.triples.iter().enumerate() {
        if s.canon[a] != a {
            continue;
        }
        let (i, gi) = (ta.feature as usize, s.w_grad[a]);
        g_w[i] += gi * gi;
        model.w[i] -= eta * gi / g_w[i].sqrt();
    }
    for slot in 0..t * nf {
        if !s.v_touched[slot] {
            continue;
        }
        let o = model.v_offset(ex.triples[slot / nf].feature as usize, slot % nf);
        for c in 0..d {
            let gk = s.v_grad[slot * d + c];
            g_v[o + c] += gk * gk;
            model.v[o + c] -= eta * gk / g_v[o + c].sqrt();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub d: usize,
    pub learning_rate: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub init_scale: f64,
    /// Epochs without held-out improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            d: 8,
            learning_rate: 0.1,
            lambda: 1e-5,
            epochs: 30,
            seed: 0,
            init_scale: 0.1,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || !(self.learning_rate > 0.0) || !(self.lambda >= 0.0) || self.epochs == 0 {
            return Err(Error::InvalidArgument(
                "train config needs d >= 1, learning rate > 0, lambda >= 0, epochs >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Mean unregularized log loss.
pub fn mean_logloss(model: &FfmModel, data: &[FfmExample]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for ex in data {
        model.check(&ex.triples)?;
        total += logloss(raw_score(model, &ex.triples), ex.label);
    }
    Ok(total / data.len() as f64)
}

/// Single-threaded AdaGrad SGD. With a validation set the model from the
/// best held-out epoch is returned.
pub fn ffm_train(
    data: &[FfmExample],
    valid: Option<&[FfmExample]>,
    cfg: &TrainConfig,
) -> Result<(FfmModel, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let all = data.iter().chain(valid.unwrap_or(&[]));
    let (mut n_features, mut n_fields) = (0, 0);
    for ex in all {
        for t in &ex.triples {
            n_features = n_features.max(t.feature as usize + 1);
            n_fields = n_fields.max(t.field as usize + 1);
        }
    }
    train_with_dims(data, valid, cfg, n_features, n_fields)
}

/// Like [`ffm_train`] with explicit dimensions (so a vocabulary larger than
/// the observed features still fits).
pub fn train_with_dims(
    data: &[FfmExample],
    valid: Option<&[FfmExample]>,
    cfg: &TrainConfig,
    n_features: usize,
    n_fields: usize,
) -> Result<(FfmModel, TrainReport)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = FfmModel::zeros(n_features, n_fields, cfg.d)?;
    let hi = cfg.init_scale / (cfg.d as f64).sqrt();
    if hi > 0.0 {
        for x in model.v.iter_mut() {
            *x = rng.random_range(0.0..hi);
        }
    }
    for ex in data.iter().chain(valid.unwrap_or(&[])) {
        model.check(&ex.triples)?;
    }
    // AdaGrad accumulators start at 1
    let mut g_w0 = 1.0;
    let mut g_w = vec![1.0; model.w.len()];
    let mut g_v = vec![1.0; model.v.len()];
    let eta = cfg.learning_rate;
    let mut scratch = Scratch::default();

    let mut report = TrainReport::default();
    let mut best: Option<(f64, FfmModel)> = None;
    let mut since_best = 0usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &idx in &order {
            sgd_step(&mut model, &data[idx], cfg.lambda, eta, &mut g_w0, &mut g_w, &mut g_v, &mut scratch);
        }
        let loss = mean_logloss(&model, data)?;
        if !loss.is_finite() || !model.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: epoch + 1,
                learning_rate: eta,
            });
        }
        report.train_loss.push(loss);
        if let Some(v) = valid.filter(|v| !v.is_empty()) {
            let vl = mean_logloss(&model, v)?;
            report.valid_loss.push(vl);
            if best.as_ref().is_none_or(|(b, _)| vl < *b) {
                best = Some((vl, model.clone()));
                report.best_epoch = epoch + 1;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= cfg.patience {
                    report.stopped_early = true;
                    break;
                }
            }
        } else {
            report.best_epoch = epoch + 1;
        }
    }
    let model = match best {
        Some((_, m)) => m,
        None => model,
    };
    Ok((model, report))
}

/// Attribute → field id and `attribute=level` → feature id, both
/// append-only.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureVocab {
    fields: BTreeMap<String, u32>,
    features: BTreeMap<String, u32>,
    #[serde(default)]
    pub frozen: bool,
}

pub const FIELD_USER_ID: &str = "user_id";
pub const FIELD_ITEM_ID: &str = "item_id";
pub const FIELD_ITEM_CLASS: &str = "item_class";
pub const FIELD_WEATHER: &str = "weather";

impl FeatureVocab {
    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn n_features(&self) -> usize {
        self.features.len()
    }

    pub fn field(&self, attr: &str) -> Option<u32> {
        self.fields.get(attr).copied()
    }

    pub fn feature(&self, attr: &str, level: &str) -> Option<u32> {
        self.features.get(&format!("{attr}={level}")).copied()
    }

    /// Ids for `attr=level`, allocating when not frozen.
    fn lookup(&mut self, attr: &str, level: &str) -> Option<(u32, u32)> {
        let key = format!("{attr}={level}");
        if self.frozen {
            return Some((self.field(attr)?, self.features.get(&key).copied()?));
        }
        let next_field = self.fields.len() as u32;
        let field = *self.fields.entry(attr.to_string()).or_insert(next_field);
        let next_feature = self.features.len() as u32;
        let feature = *self.features.entry(key).or_insert(next_feature);
        Some((field, feature))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncodeOptions {
    pub item_classes: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        EncodeOptions { item_classes: true }
    }
}

/// One-hot triples for a (user, item, context) triple. Returns the triples
/// and how many were skipped because the frozen vocabulary lacked them.
pub fn encode_example(
    user: &UserRecord,
    item: ItemId,
    graph: &OntologyGraph,
    weather: Option<Weather>,
    vocab: &mut FeatureVocab,
    opts: EncodeOptions,
) -> (Vec<FfmTriple>, usize) {
    let mut pairs: Vec<(&str, String)> = vec![(FIELD_USER_ID, user.id.to_string())];
    pairs.extend(user.attribute_levels());
    pairs.push((FIELD_ITEM_ID, item.to_string()));
    if opts.item_classes {
        for class in graph.item_classes(item) {
            pairs.push((FIELD_ITEM_CLASS, class.to_string()));
        }
    }
    if let Some(w) = weather {
        pairs.push((FIELD_WEATHER, w.to_string()));
    }
    let mut triples = Vec::with_capacity(pairs.len());
    let mut skipped = 0;
    for (attr, level) in pairs {
        match vocab.lookup(attr, &level) {
            Some((field, feature)) => triples.push(FfmTriple::new(field, feature, 1.0)),
            None => skipped += 1,
        }
    }
    (triples, skipped)
}

/// Training examples from user feedback. Ratings label by the relevance
/// threshold; book/bookmark are positives and dismiss a negative. Users with
/// positives only get as many sampled unconsumed negatives.
#[allow(clippy::too_many_arguments)]
pub fn build_training_set(
    users: &BTreeMap<UserId, UserRecord>,
    opinions: &BTreeMap<UserId, Opinions>,
    graph: &OntologyGraph,
    vocab: &mut FeatureVocab,
    opts: EncodeOptions,
    seed: u64,
) -> Vec<FfmExample> {
    let catalog = graph.item_ids();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (uid, ops) in opinions {
        let Some(user) = users.get(uid) else { continue };
        let mut positives = 0usize;
        let mut negatives = 0usize;
        for (item, o) in &ops.items {
            let label = match (o.rating, o.implicit) {
                (Some(r), _) => u8::from(r >= RELEVANCE_THRESHOLD),
                (None, Some(s)) => u8::from(s > 0.0),
                (None, None) => continue,
            };
            if label == 1 {
                positives += 1;
            } else {
                negatives += 1;
            }
            let (triples, _) = encode_example(user, *item, graph, None, vocab, opts);
            out.push(FfmExample::new(label, triples));
        }
        if positives > 0 && negatives == 0 {
            let touched: BTreeSet<ItemId> = ops.items.keys().copied().collect();
            let mut pool: Vec<ItemId> = catalog.iter().copied().filter(|i| !touched.contains(i)).collect();
            pool.shuffle(&mut rng);
            for item in pool.into_iter().take(positives) {
                let (triples, _) = encode_example(user, item, graph, None, vocab, opts);
                out.push(FfmExample {
                    sampled: true,
                    ..FfmExample::new(0, triples)
                });
            }
        }
    }
    out
}

/// Scores candidate items by predicted probability. Features unknown to the
/// model or the frozen vocabulary are dropped.
pub fn recommend_collaborative(
    user: &UserRecord,
    candidates: &[ItemId],
    model: Option<&FfmModel>,
    vocab: &FeatureVocab,
    graph: &OntologyGraph,
    exclude: &BTreeSet<ItemId>,
    n: usize,
    opts: EncodeOptions,
) -> Result<RecList> {
    let model = model.ok_or(Error::Untrained)?;
    let mut frozen = vocab.clone();
    frozen.frozen = true;
    let mut scored = Vec::new();
    for &item in candidates.iter().filter(|i| !exclude.contains(i)) {
        let (mut triples, _) = encode_example(user, item, graph, None, &mut frozen, opts);
        triples.retain(|t| (t.feature as usize) < model.n_features && (t.field as usize) < model.n_fields);
        let (_, p) = ffm_predict(model, &triples)?;
        scored.push((item, p));
    }
    Ok(RecList {
        items: top_n(scored, n)
            .into_iter()
            .map(|(i, s)| Recommendation::new(i, s))
            .collect(),
        fallback: false,
        diagnostic: None,
    })
}
