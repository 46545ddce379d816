//! The recommender engine: state built from events, per-model
//! recommendations and the phase-weighted ensemble.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::context::{context_factors, ContextParams, ContextState, GeoPoint, Weather};
use crate::demographic::{
    choose_k, knn_predict, ClusterConfig, ClusterModel, MixedDistanceSchema, Opinions, UserRecord,
    DEFAULT_EPSILON, DEFAULT_K_NN,
};
use crate::ffm::{
    build_training_set, ffm_predict, train_with_dims, EncodeOptions, FeatureVocab, FfmModel, TrainConfig,
    encode_example,
};
use crate::ontology::{ContentMatrices, ItemLink, ItemRecord, OntologyGraph};
use crate::phase::{aggregate, determine_phase, update_weights, MaturityState, MemberScores, PhaseConfig};
use crate::popularity::{hybrid_scores, rank_hybrid, PopularityConfig, PopularityStats};
use crate::preferences::{
    apply_feedback, content_scores, init_preferences, FeedbackEvent, FeedbackKind, PreferenceConfig,
    PreferenceState,
};
use crate::rec::{by_score_then_id, RecList, Recommendation, RecommenderKind};
use crate::{Error, ItemId, Result, UserId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub preferences: PreferenceConfig,
    pub popularity: PopularityConfig,
    pub phase: PhaseConfig,
    pub context: ContextParams,
    pub distance: MixedDistanceSchema,
    pub cluster: ClusterConfig,
    pub k_min: usize,
    pub k_max: usize,
    pub k_nn: usize,
    pub epsilon: f64,
    pub train: TrainConfig,
    pub encode: EncodeOptions,
    /// Re-cluster after this many new users (phase ≥ 3).
    pub retrain_users_every: usize,
    /// Re-train the FFM after this many new ratings (phase 4).
    pub retrain_ratings_every: usize,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            preferences: PreferenceConfig::default(),
            popularity: PopularityConfig::default(),
            phase: PhaseConfig::default(),
            context: ContextParams::default(),
            distance: MixedDistanceSchema::default(),
            cluster: ClusterConfig::default(),
            k_min: 2,
            k_max: 8,
            k_nn: DEFAULT_K_NN,
            epsilon: DEFAULT_EPSILON,
            train: TrainConfig::default(),
            encode: EncodeOptions::default(),
            retrain_users_every: 50,
            retrain_ratings_every: 50,
            seed: 7,
        }
    }
}

impl EngineConfig {
    pub fn from_json(text: &str) -> Result<EngineConfig> {
        let cfg: EngineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.preferences.weights.validate()?;
        self.phase.validate()?;
        self.context.validate()?;
        self.train.validate()?;
        if self.k_min < 1 || self.k_max < self.k_min {
            return Err(Error::InvalidArgument(format!(
                "cluster range {}..={} is empty",
                self.k_min, self.k_max
            )));
        }
        if self.k_nn == 0 {
            return Err(Error::InvalidArgument("k_nn must be >= 1".into()));
        }
        Ok(())
    }
}

/// A state change. Replaying the same events yields the same engine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    UserCreated {
        user: UserRecord,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        selection: Option<Vec<f64>>,
    },
    PreferencesSet {
        user: UserId,
        selection: Vec<f64>,
    },
    Feedback {
        event: FeedbackEvent,
    },
    Rating {
        user: UserId,
        item: ItemId,
        rating: f64,
        #[serde(default)]
        timestamp: i64,
    },
    ItemAdded {
        item: ItemRecord,
        /// Links from binning; items with categories link by category.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        links: Option<Vec<ItemLink>>,
    },
}

/// Everything that replay reconstructs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineState {
    pub graph: OntologyGraph,
    pub users: BTreeMap<UserId, UserRecord>,
    pub prefs: BTreeMap<UserId, PreferenceState>,
    pub opinions: BTreeMap<UserId, Opinions>,
    /// Consumption (book / rate) times per user.
    pub history: BTreeMap<UserId, Vec<(ItemId, i64)>>,
    pub popularity: PopularityStats,
    pub rating_count: usize,
    pub phase: u8,
    pub cluster: Option<ClusterModel>,
    pub cluster_costs: Vec<f64>,
    pub ffm: Option<FfmModel>,
    pub vocab: FeatureVocab,
    pub clustered_at_users: usize,
    pub trained_at_ratings: usize,
    pub events_applied: u64,
}

impl EngineState {
    pub fn new(graph: OntologyGraph) -> Self {
        EngineState {
            graph,
            users: BTreeMap::new(),
            prefs: BTreeMap::new(),
            opinions: BTreeMap::new(),
            history: BTreeMap::new(),
            popularity: PopularityStats::default(),
            rating_count: 0,
            phase: 1,
            cluster: None,
            cluster_costs: Vec::new(),
            ffm: None,
            vocab: FeatureVocab::default(),
            clustered_at_users: 0,
            trained_at_ratings: 0,
            events_applied: 0,
        }
    }
}

/// Request-time context supplied by the caller; consumption history comes
/// from the engine.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RequestContext {
    pub hotel: Option<GeoPoint>,
    pub weather: Option<Weather>,
    pub now: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    pub user: UserRecord,
    pub hl: BTreeMap<String, f64>,
    pub ll: BTreeMap<String, f64>,
    pub opinions: Opinions,
    pub fallback: bool,
}

#[derive(Debug, Clone)]
pub struct Engine {
    pub config: EngineConfig,
    state: EngineState,
    matrices: ContentMatrices,
}

impl Engine {
    pub fn new(graph: OntologyGraph, config: EngineConfig) -> Result<Engine> {
        config.validate()?;
        Ok(Engine::from_state(EngineState::new(graph), config))
    }

    pub fn from_state(state: EngineState, config: EngineConfig) -> Engine {
        let matrices = state.graph.content_matrices();
        Engine {
            config,
            state,
            matrices,
        }
    }

    pub fn state(&self) -> &EngineState {
        &self.state
    }

    pub fn graph(&self) -> &OntologyGraph {
        &self.state.graph
    }

    pub fn matrices(&self) -> &ContentMatrices {
        &self.matrices
    }

    pub fn maturity(&self) -> MaturityState {
        MaturityState {
            user_count: self.state.users.len(),
            rating_count: self.state.rating_count,
            item_count: self.state.graph.items().len(),
            phase: self.state.phase,
        }
    }

    pub fn weights(&self) -> Vec<(RecommenderKind, f64)> {
        update_weights(self.state.phase, &self.maturity(), &self.config.phase)
    }

    pub fn user(&self, id: UserId) -> Result<&UserRecord> {
        self.state.users.get(&id).ok_or(Error::UnknownUser(id))
    }

    /// Checks an event against the current state without applying it.
    pub fn check(&self, event: &Event) -> Result<()> {
        let s = &self.state;
        let known_item = |i: ItemId| s.graph.item(i).map(|_| ()).ok_or(Error::UnknownItem(i));
        match event {
            Event::UserCreated { user, selection } => {
                if s.users.contains_key(&user.id) {
                    return Err(Error::Duplicate {
                        what: "user",
                        id: user.id.to_string(),
                    });
                }
                user.clone().normalize()?;
                if let Some(sel) = selection {
                    init_preferences(user.id, sel, &self.matrices)?;
                }
                Ok(())
            }
            Event::PreferencesSet { user, selection } => {
                self.user(*user)?;
                init_preferences(*user, selection, &self.matrices).map(|_| ())
            }
            Event::Feedback { event } => {
                self.user(event.user)?;
                known_item(event.item)?;
                event.validate()
            }
            Event::Rating { user, item, rating, timestamp } => {
                self.user(*user)?;
                known_item(*item)?;
                FeedbackEvent {
                    timestamp: *timestamp,
                    ..FeedbackEvent::rate(*user, *item, *rating)
                }
                .validate()
            }
            Event::ItemAdded { item, links } => {
                let mut g = s.graph.clone();
                g.add_item(item.clone())?;
                if let Some(l) = links {
                    g.set_links(item.id, l.clone())?;
                }
                Ok(())
            }
        }
    }

    /// Applies one event; on error the state is unchanged.
    pub fn apply(&mut self, event: &Event) -> Result<()> {
        self.check(event)?;
        match event {
            Event::UserCreated { user, selection } => {
                let mut user = user.clone();
                user.normalize()?;
                let zeros = vec![0.0; self.matrices.hl_labels.len()];
                let sel = selection.as_deref().unwrap_or(&zeros);
                let prefs = init_preferences(user.id, sel, &self.matrices)?;
                self.state.prefs.insert(user.id, prefs);
                self.state.users.insert(user.id, user);
            }
            Event::PreferencesSet { user, selection } => {
                let fresh = init_preferences(*user, selection, &self.matrices)?;
                self.state.prefs.insert(*user, fresh);
            }
            Event::Feedback { event } => {
                if event.kind == FeedbackKind::Rate {
                    self.rate(event)?;
                } else {
                    self.feedback(event)?;
                }
            }
            Event::Rating { user, item, rating, timestamp } => {
                let fe = FeedbackEvent {
                    timestamp: *timestamp,
                    ..FeedbackEvent::rate(*user, *item, *rating)
                };
                self.rate(&fe)?;
            }
            Event::ItemAdded { item, links } => {
                self.state.graph.add_item(item.clone())?;
                if let Some(l) = links {
                    self.state.graph.set_links(item.id, l.clone())?;
                }
                self.matrices = self.state.graph.content_matrices();
                for p in self.state.prefs.values_mut() {
                    p.refresh(&self.matrices)?;
                }
            }
        }
        self.state.events_applied += 1;
        self.state.phase = determine_phase(&self.maturity(), self.state.phase, &self.config.phase);
        self.maybe_retrain()
    }

    fn feedback(&mut self, event: &FeedbackEvent) -> Result<()> {
        let prefs = self.state.prefs.get_mut(&event.user).ok_or(Error::UnknownUser(event.user))?;
        apply_feedback(prefs, event, &self.state.graph, &self.matrices, &self.config.preferences)?;
        self.state.opinions.entry(event.user).or_default().record(event);
        if event.kind == FeedbackKind::Book {
            self.state.history.entry(event.user).or_default().push((event.item, event.timestamp));
        }
        Ok(())
    }

    fn rate(&mut self, event: &FeedbackEvent) -> Result<()> {
        self.feedback(event)?;
        let rating = event.rating.expect("validated rate event");
        self.state.history.entry(event.user).or_default().push((event.item, event.timestamp));
        self.state.popularity.add(event.item, rating);
        self.state.rating_count += 1;
        Ok(())
    }

    fn maybe_retrain(&mut self) -> Result<()> {
        let s = &self.state;
        let users = s.users.len();
        if s.phase >= 3
            && users >= 2
            && (s.cluster.is_none() || users >= s.clustered_at_users + self.config.retrain_users_every)
        {
            self.retrain_clusters()?;
        }
        let s = &self.state;
        if s.phase >= 4
            && s.rating_count > 0
            && (s.ffm.is_none() || s.rating_count >= s.trained_at_ratings + self.config.retrain_ratings_every)
        {
            self.retrain_ffm()?;
        }
        Ok(())
    }

    /// Re-fits K-Prototypes with k chosen by the knee of the cost curve.
    pub fn retrain_clusters(&mut self) -> Result<()> {
        let users: Vec<UserRecord> = self.state.users.values().cloned().collect();
        let k_max = self.config.k_max.min(users.len());
        let k_min = self.config.k_min.min(k_max);
        let cfg = ClusterConfig {
            seed: self.config.seed,
            ..self.config.cluster
        };
        let (k, costs) = if k_max - k_min >= 2 {
            choose_k(&users, k_min, k_max, &cfg)?
        } else {
            (k_min, Vec::new())
        };
        self.state.cluster = Some(crate::demographic::kprototypes_fit(&users, k, &cfg)?);
        self.state.cluster_costs = costs;
        self.state.clustered_at_users = users.len();
        Ok(())
    }

    /// Re-trains the FFM on all feedback. A failed fit keeps the previous
    /// model.
    pub fn retrain_ffm(&mut self) -> Result<()> {
        let mut vocab = self.state.vocab.clone();
        let data = build_training_set(
            &self.state.users,
            &self.state.opinions,
            &self.state.graph,
            &mut vocab,
            self.config.encode,
            self.config.seed,
        );
        self.state.trained_at_ratings = self.state.rating_count;
        if data.is_empty() {
            return Ok(());
        }
        let cfg = TrainConfig {
            seed: self.config.seed,
            ..self.config.train
        };
        match train_with_dims(&data, None, &cfg, vocab.n_features(), vocab.n_fields()) {
            Ok((model, _)) => {
                self.state.ffm = Some(model);
                self.state.vocab = vocab;
                Ok(())
            }
            Err(Error::NonFiniteLoss { .. }) => Ok(()),
            Err(e) => Err(e),
        }
    }

    pub fn profile(&self, id: UserId) -> Result<Profile> {
        let user = self.user(id)?.clone();
        let p = &self.state.prefs[&id];
        let label = |labels: &[String], v: &[f64]| labels.iter().cloned().zip(v.iter().copied()).collect();
        Ok(Profile {
            user,
            hl: label(&self.matrices.hl_labels, &p.p_hl),
            ll: label(&self.matrices.ll_labels, &p.p_ll),
            opinions: self.state.opinions.get(&id).cloned().unwrap_or_default(),
            fallback: p.is_fallback(),
        })
    }

    pub fn preferences(&self, id: UserId) -> Result<&PreferenceState> {
        self.state.prefs.get(&id).ok_or(Error::UnknownUser(id))
    }

    fn context_state(&self, user: UserId, ctx: &RequestContext) -> ContextState {
        ContextState {
            hotel: ctx.hotel,
            weather: ctx.weather,
            now: ctx.now,
            history: self.state.history.get(&user).cloned().unwrap_or_default(),
        }
    }

    fn factors(&self, user: UserId, ctx: &RequestContext) -> Result<BTreeMap<ItemId, f64>> {
        let dismissed = self
            .state
            .opinions
            .get(&user)
            .map(Opinions::dismissed)
            .unwrap_or_default();
        let candidates: Vec<ItemId> = self
            .state
            .graph
            .item_ids()
            .into_iter()
            .filter(|i| !dismissed.contains(i))
            .collect();
        context_factors(&candidates, &self.state.graph, &self.context_state(user, ctx), &self.config.context)
    }

    /// Raw scores of one recommender over the whole catalog. `None` when the
    /// model has nothing to say for this user.
    pub fn member_scores(&self, user: UserId, kind: RecommenderKind) -> Result<Option<MemberScores>> {
        let prefs = self.preferences(user)?;
        let m = &self.matrices;
        let w = self.config.preferences.weights;
        Ok(match kind {
            RecommenderKind::Content => {
                let (scores, fallback) = content_scores(prefs, m, w)?;
                let mut ms = MemberScores::new(kind, 1.0, m.item_ids.iter().copied().zip(scores).collect());
                ms.fallback = fallback;
                Some(ms)
            }
            RecommenderKind::Hybrid => {
                let (triples, fallback) =
                    hybrid_scores(prefs, m, &self.state.popularity, &self.config.popularity, w)?;
                // survivors sit above every backfilled item
                let scores = triples.iter().map(|&(i, s, pass)| (i, if pass { s + 2.0 } else { s })).collect();
                let mut ms = MemberScores::new(kind, 1.0, scores);
                ms.backfilled = triples.iter().filter(|t| !t.2).map(|t| t.0).collect();
                ms.fallback = fallback;
                Some(ms)
            }
            RecommenderKind::Demographic => self.demographic_scores(user)?,
            RecommenderKind::Collaborative => self.collaborative_scores(user)?,
        })
    }

    fn consumed(&self, user: UserId) -> BTreeSet<ItemId> {
        self.state.opinions.get(&user).map(Opinions::consumed).unwrap_or_default()
    }

    fn demographic_scores(&self, user: UserId) -> Result<Option<MemberScores>> {
        let Some(model) = &self.state.cluster else { return Ok(None) };
        let target = self.user(user)?;
        let cluster = model.assign(target);
        let empty = Opinions::default();
        let members: Vec<(&UserRecord, &Opinions)> = self
            .state
            .users
            .values()
            .filter(|u| model.assign(u) == cluster)
            .map(|u| (u, self.state.opinions.get(&u.id).unwrap_or(&empty)))
            .collect();
        let pred = knn_predict(target, &members, self.config.k_nn, &self.config.distance, self.config.epsilon);
        if pred.is_empty() {
            return Ok(None);
        }
        let consumed = self.consumed(user);
        // signals live in [-1, 1]; shift to [0, 1] so context factors only demote
        let scores = self
            .state
            .graph
            .item_ids()
            .into_iter()
            .filter(|i| !consumed.contains(i))
            .map(|i| (i, (pred.scores.get(&i).copied().unwrap_or(0.0) + 1.0) / 2.0))
            .collect();
        Ok(Some(MemberScores::new(RecommenderKind::Demographic, 1.0, scores)))
    }

    fn collaborative_scores(&self, user: UserId) -> Result<Option<MemberScores>> {
        let Some(model) = &self.state.ffm else { return Ok(None) };
        let target = self.user(user)?;
        let consumed = self.consumed(user);
        let mut vocab = self.state.vocab.clone();
        vocab.frozen = true;
        let mut scores = Vec::new();
        for item in self.state.graph.item_ids() {
            if consumed.contains(&item) {
                continue;
            }
            let (mut triples, _) = encode_example(target, item, &self.state.graph, None, &mut vocab, self.config.encode);
            triples.retain(|t| (t.feature as usize) < model.n_features && (t.field as usize) < model.n_fields);
            scores.push((item, ffm_predict(model, &triples)?.1));
        }
        Ok(Some(MemberScores::new(RecommenderKind::Collaborative, 1.0, scores)))
    }

    /// Top-N of a single recommender after context filtering.
    pub fn recommend_model(&self, user: UserId, kind: RecommenderKind, ctx: &RequestContext, n: usize) -> Result<RecList> {
        let factors = self.factors(user, ctx)?;
        let Some(ms) = self.member_scores(user, kind)? else {
            return Ok(RecList::empty_with(match kind {
                RecommenderKind::Demographic => "no cluster neighbour has feedback yet",
                _ => "model not trained yet",
            }));
        };
        let mut list = if kind == RecommenderKind::Hybrid {
            let (triples, _) = hybrid_scores(
                self.preferences(user)?,
                &self.matrices,
                &self.state.popularity,
                &self.config.popularity,
                self.config.preferences.weights,
            )?;
            let filtered = triples
                .into_iter()
                .filter_map(|(i, s, pass)| factors.get(&i).map(|f| (i, s * f, pass)))
                .collect();
            RecList {
                items: rank_hybrid(filtered, n),
                fallback: ms.fallback,
                diagnostic: None,
            }
        } else {
            let mut scored: Vec<(ItemId, f64)> = ms
                .scores
                .iter()
                .filter_map(|(i, s)| factors.get(i).map(|f| (*i, s * f)))
                .collect();
            scored.sort_by(by_score_then_id);
            scored.truncate(n);
            RecList {
                items: scored.into_iter().map(|(i, s)| Recommendation::new(i, s)).collect(),
                fallback: ms.fallback,
                diagnostic: ms.fallback.then(|| "no preferences yet; non-personalized ranking".into()),
            }
        };
        for r in &mut list.items {
            r.sources = vec![kind];
        }
        Ok(list)
    }

    /// Phase-weighted ensemble of the active recommenders.
    pub fn recommend(&self, user: UserId, ctx: &RequestContext, n: usize) -> Result<RecList> {
        let mut members = Vec::new();
        for (kind, weight) in self.weights() {
            if let Some(mut ms) = self.member_scores(user, kind)? {
                ms.weight = weight;
                if !ms.empty && weight > 0.0 {
                    members.push(ms);
                }
            }
        }
        match members.len() {
            0 => Ok(RecList::empty_with("no active recommender produced output")),
            1 => self.recommend_model(user, members[0].kind, ctx, n),
            _ => {
                let factors = self.factors(user, ctx)?;
                Ok(aggregate(members, Some(&factors), n, self.config.phase.aggregation))
            }
        }
    }
}
