//! Milestone simulation: grow a synthetic population, replay it into the
//! engine and evaluate every active recommender at each checkpoint.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::{Engine, EngineConfig, Event, RequestContext};
use crate::metrics::{evaluate, item_features, EvalReport, EvalSet, FeatureLevel, UserEval, CSV_HEADER, RELEVANCE_THRESHOLD};
use crate::ontology::OntologyGraph;
use crate::phase::active_recommenders;
use crate::synthetic::{gen_latent_prefs, gen_users, hl_selection, user_rating_row, GenConfig, Rating};
use crate::{Error, ItemId, RecommenderKind, Result, UserId};

pub const DEFAULT_MILESTONES: [(usize, usize); 5] = [(98, 0), (98, 64), (198, 191), (250, 191), (1000, 883)];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationPlan {
    pub milestones: Vec<(usize, usize)>,
    pub seed: u64,
    pub k: usize,
}

impl Default for SimulationPlan {
    fn default() -> Self {
        SimulationPlan {
            milestones: DEFAULT_MILESTONES.to_vec(),
            seed: 7,
            k: 5,
        }
    }
}

impl SimulationPlan {
    pub fn validate(&self, n_items: usize) -> Result<()> {
        if self.milestones.is_empty() {
            return Err(Error::InvalidArgument("plan has no milestones".into()));
        }
        if self.k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        let mut prev = (0, 0);
        for &(u, r) in &self.milestones {
            if u == 0 {
                return Err(Error::InvalidArgument("milestone with 0 users".into()));
            }
            if u < prev.0 || r < prev.1 {
                return Err(Error::InvalidArgument(format!(
                    "milestone ({u}, {r}) goes backwards from ({}, {})",
                    prev.0, prev.1
                )));
            }
            if r > u * n_items {
                return Err(Error::InvalidArgument(format!(
                    "milestone ({u}, {r}) has more ratings than user-item pairs"
                )));
            }
            prev = (u, r);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: RecommenderKind,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MilestoneResult {
    pub users: usize,
    pub ratings: usize,
    pub phase: u8,
    pub density: f64,
    pub models: Vec<ModelReport>,
}

impl MilestoneResult {
    pub fn report(&self, kind: RecommenderKind) -> Option<&EvalReport> {
        self.models.iter().find(|m| m.model == kind).map(|m| &m.report)
    }
}

/// Ground truth: items whose complete (mostly unobserved) synthetic rating
/// reaches the relevance threshold.
struct Truth {
    relevant: BTreeMap<UserId, BTreeSet<ItemId>>,
    /// Candidate ratings in arrival order: (draw, user, item, rating).
    pool: Vec<(f64, UserId, ItemId, f64)>,
}

fn build_truth(graph: &OntologyGraph, gen: &GenConfig) -> Result<(Vec<crate::demographic::UserRecord>, Vec<Vec<f64>>, Truth)> {
    let users = gen_users(gen)?;
    let prefs = gen_latent_prefs(&users, gen)?;
    let mut relevant = BTreeMap::new();
    let mut pool = Vec::new();
    let mut selections = Vec::new();
    for p in &prefs {
        let row = user_rating_row(p, graph, gen);
        relevant.insert(
            p.user,
            row.iter().filter(|(_, r, _)| *r >= RELEVANCE_THRESHOLD).map(|(i, _, _)| *i).collect(),
        );
        pool.extend(row.into_iter().map(|(i, r, d)| (d, p.user, i, r)));
        selections.push(hl_selection(p, graph));
    }
    Ok((users, selections, Truth { relevant, pool }))
}

/// Runs the plan. Each milestone adds the new users, then the new ratings:
/// the unrated pairs among current users with the smallest seeded draws.
pub fn run_simulation(
    plan: &SimulationPlan,
    graph: &OntologyGraph,
    config: &EngineConfig,
) -> Result<Vec<MilestoneResult>> {
    let n_items = graph.items().len();
    plan.validate(n_items)?;
    let max_users = plan.milestones.iter().map(|m| m.0).max().unwrap_or(0);
    let gen = GenConfig {
        n_users: max_users,
        seed: plan.seed,
        ..Default::default()
    };
    let (users, selections, mut truth) = build_truth(graph, &gen)?;
    truth.pool.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut engine = Engine::new(graph.clone(), EngineConfig { seed: plan.seed, ..config.clone() })?;
    let hl = item_features(graph, FeatureLevel::Hl);
    let ll = item_features(graph, FeatureLevel::Ll);
    let mut rated: Vec<Rating> = Vec::new();
    let mut taken = vec![false; truth.pool.len()];
    let mut clock = 0i64;
    let mut results = Vec::new();

    for &(n_users, n_ratings) in &plan.milestones {
        for (u, sel) in users.iter().zip(&selections).skip(engine.state().users.len()).take(n_users - engine.state().users.len()) {
            engine.apply(&Event::UserCreated { user: u.clone(), selection: Some(sel.clone()) })?;
        }
        let mut need = n_ratings - rated.len();
        for (slot, &(_, user, item, rating)) in truth.pool.iter().enumerate() {
            if need == 0 {
                break;
            }
            if taken[slot] || user.0 as usize >= n_users {
                continue;
            }
            taken[slot] = true;
            clock += 1;
            engine.apply(&Event::Rating { user, item, rating, timestamp: clock })?;
            rated.push(Rating { user, item, rating });
            need -= 1;
        }

        let mut counts: BTreeMap<ItemId, BTreeSet<UserId>> = BTreeMap::new();
        for r in &rated {
            counts.entry(r.item).or_default().insert(r.user);
        }
        let counts: BTreeMap<ItemId, usize> = counts.into_iter().map(|(i, s)| (i, s.len())).collect();
        let phase = engine.state().phase;
        let ctx = RequestContext { now: clock, ..Default::default() };
        let mut models = Vec::new();
        for &kind in active_recommenders(phase) {
            let mut set = EvalSet {
                users: Vec::with_capacity(n_users),
                train_items: graph.item_ids().into_iter().collect(),
                counts: counts.clone(),
                population: Some(n_users),
            };
            for u in users.iter().take(n_users) {
                let list = engine.recommend_model(u.id, kind, &ctx, plan.k)?;
                set.users.push(UserEval {
                    user: u.id,
                    recs: list.item_ids(),
                    relevant: truth.relevant[&u.id].clone(),
                });
            }
            models.push(ModelReport {
                model: kind,
                report: evaluate(&set, plan.k, &hl, &ll)?,
            });
        }
        results.push(MilestoneResult {
            users: n_users,
            ratings: rated.len(),
            phase,
            density: engine.maturity().density(),
            models,
        });
    }
    Ok(results)
}

fn header_with(prefix: &[&str]) -> String {
    prefix.iter().copied().chain(CSV_HEADER).collect::<Vec<_>>().join(",")
}

pub fn write_milestone_csv(result: &MilestoneResult, mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", header_with(&["model"]))?;
    for m in &result.models {
        writeln!(out, "{},{}", m.model.label(), m.report.csv_row())?;
    }
    Ok(())
}

fn comparison_rows(results: &[MilestoneResult]) -> Vec<(String, &MilestoneResult, [f64; 7])> {
    let mut rows = Vec::new();
    for r in results {
        for m in &r.models {
            rows.push((format!("{} P{}", m.model.label(), r.phase), r, m.report.values()));
        }
    }
    rows
}

/// One row per (milestone, model).
pub fn write_comparison_csv(results: &[MilestoneResult], mut out: impl Write) -> Result<()> {
    writeln!(out, "{}", header_with(&["model", "users", "ratings"]))?;
    for (label, r, values) in comparison_rows(results) {
        let v: Vec<String> = values.iter().map(|v| format!("{v:.4}")).collect();
        writeln!(out, "{label},{},{},{}", r.users, r.ratings, v.join(","))?;
    }
    Ok(())
}

/// The comparison table with every metric column min-max scaled to [0, 1];
/// constant columns become 0.
pub fn write_scaled_comparison_csv(results: &[MilestoneResult], mut out: impl Write) -> Result<()> {
    let rows = comparison_rows(results);
    let mut lo = [f64::INFINITY; 7];
    let mut hi = [f64::NEG_INFINITY; 7];
    for (_, _, v) in &rows {
        for c in 0..7 {
            lo[c] = lo[c].min(v[c]);
            hi[c] = hi[c].max(v[c]);
        }
    }
    writeln!(out, "{}", header_with(&["model", "users", "ratings"]))?;
    for (label, r, v) in &rows {
        let scaled: Vec<String> = (0..7)
            .map(|c| {
                let span = hi[c] - lo[c];
                format!("{:.4}", if span > 0.0 { (v[c] - lo[c]) / span } else { 0.0 })
            })
            .collect();
        writeln!(out, "{label},{},{},{}", r.users, r.ratings, scaled.join(","))?;
    }
    Ok(())
}

/// Writes `milestone_<i>_<users>u_<ratings>r.csv` per milestone plus
/// `comparison.csv` and `comparison_scaled.csv`. Returns the paths written.
pub fn write_outputs(results: &[MilestoneResult], dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (i, r) in results.iter().enumerate() {
        let p = dir.join(format!("milestone_{}_{}u_{}r.csv", i + 1, r.users, r.ratings));
        write_milestone_csv(r, std::fs::File::create(&p)?)?;
        paths.push(p);
    }
    let p = dir.join("comparison.csv");
    write_comparison_csv(results, std::fs::File::create(&p)?)?;
    paths.push(p);
    let p = dir.join("comparison_scaled.csv");
    write_scaled_comparison_csv(results, std::fs::File::create(&p)?)?;
    paths.push(p);
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_milestone_is_one_content_row() {
        let plan = SimulationPlan { milestones: vec![(20, 0)], ..Default::default() };
        let res = run_simulation(&plan, &OntologyGraph::fixture(), &EngineConfig::default()).unwrap();
        assert_eq!(res.len(), 1);
        assert_eq!(res[0].phase, 1);
        assert_eq!(res[0].models.len(), 1);
        assert_eq!(res[0].models[0].model, RecommenderKind::Content);
        let mut buf = Vec::new();
        write_milestone_csv(&res[0], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0], "model,MAP@K,MAR@K,Coverage,Personalization,Diversity HL,Diversity LL,Novelty");
        assert_eq!(lines[1].split(',').count(), 8);
    }

    #[test]
    fn bad_plans_are_rejected() {
        let g = OntologyGraph::fixture();
        let cfg = EngineConfig::default();
        for milestones in [vec![(0, 0)], vec![(10, 5), (5, 5)], vec![(1, 30)], vec![]] {
            let plan = SimulationPlan { milestones, ..Default::default() };
            assert!(run_simulation(&plan, &g, &cfg).is_err());
        }
    }

    #[test]
    fn exact_rating_counts_and_determinism() {
        let plan = SimulationPlan { milestones: vec![(30, 0), (30, 12), (40, 20)], ..Default::default() };
        let g = OntologyGraph::fixture();
        let a = run_simulation(&plan, &g, &EngineConfig::default()).unwrap();
        let b = run_simulation(&plan, &g, &EngineConfig::default()).unwrap();
        assert_eq!(a, b);
        let counts: Vec<(usize, usize, u8)> = a.iter().map(|r| (r.users, r.ratings, r.phase)).collect();
        assert_eq!(counts, vec![(30, 0, 1), (30, 12, 2), (40, 20, 2)]);
    }
}
