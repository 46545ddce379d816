//! Browser bindings for the static demo page in `www/`.
//!
//! Every function returns a JSON string; errors come back as a rejected
//! JS exception carrying the message.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use ontorec::context::{repetition_willingness, ContextParams};
use ontorec::demographic::UserRecord;
use ontorec::engine::{Engine, EngineConfig, Event, RequestContext};
use ontorec::ontology::OntologyGraph;
use ontorec::popularity::PopularityStats;
use ontorec::ItemId;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn to_json(v: &impl Serialize) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(js_err)
}

/// High-level interest classes in the order the selection vector uses.
#[wasm_bindgen]
pub fn hl_classes() -> Result<String, JsValue> {
    let graph = OntologyGraph::fixture();
    to_json(&graph.content_matrices().hl_labels)
}

#[derive(Serialize)]
struct Row {
    item: u32,
    name: String,
    score: f64,
    classes: Vec<String>,
}

#[derive(Serialize)]
struct Recs {
    fallback: bool,
    items: Vec<Row>,
}

/// Cold-start content recommendations for a new user who ticked the given
/// high-level classes (JSON array of labels).
#[wasm_bindgen]
pub fn recommend_for_selection(selection_json: &str, n: usize) -> Result<String, JsValue> {
    let picked: Vec<String> = serde_json::from_str(selection_json).map_err(js_err)?;
    to_json(&recommend(&picked, n).map_err(js_err)?)
}

fn recommend(picked: &[String], n: usize) -> ontorec::Result<Recs> {
    let graph = OntologyGraph::fixture();
    let mut engine = Engine::new(graph, EngineConfig::default())?;
    let labels = engine.matrices().hl_labels.clone();
    if let Some(bad) = picked.iter().find(|p| !labels.contains(p)) {
        return Err(ontorec::Error::UnknownClass(bad.clone()));
    }
    let selection = labels.iter().map(|l| f64::from(picked.contains(l))).collect();
    let user = UserRecord::new(0, 35, 3, 2, 2, "Female", "white collar", "South Europe", "2Adlt")?;
    engine.apply(&Event::UserCreated { user: user.clone(), selection: Some(selection) })?;
    let list = engine.recommend(user.id, &RequestContext::default(), n)?;
    let g = engine.graph();
    Ok(Recs {
        fallback: list.fallback,
        items: list
            .items
            .iter()
            .map(|r| Row {
                item: r.item.0,
                name: g.item(r.item).map(|i| i.name.clone()).unwrap_or_default(),
                score: r.score,
                classes: g.item_hl_classes(r.item).into_iter().map(String::from).collect(),
            })
            .collect(),
    })
}

/// Damped mean of the given ratings against `prior` for k = 0..=k_max.
#[wasm_bindgen]
pub fn damped_mean_curve(ratings_json: &str, prior: f64, k_max: u32) -> Result<String, JsValue> {
    let ratings: Vec<f64> = serde_json::from_str(ratings_json).map_err(js_err)?;
    if let Some(r) = ratings.iter().find(|r| !(0.0..=5.0).contains(*r)) {
        return Err(js_err(format!("rating {r} outside [0, 5]")));
    }
    let mut stats = PopularityStats::from_ratings(ratings.iter().map(|&r| (ItemId(0), r)));
    stats.prior = Some(prior);
    let curve = (0..=k_max)
        .map(|k| stats.damped_mean(ItemId(0), f64::from(k)).map(|v| (k, v)))
        .collect::<ontorec::Result<Vec<_>>>()
        .map_err(js_err)?;
    to_json(&curve)
}

/// Willingness to repeat an item of `class` after 0..=days_max days.
#[wasm_bindgen]
pub fn willingness_curve(class: &str, days_max: u32) -> Result<String, JsValue> {
    let params = ContextParams::default();
    let curve: Vec<(u32, f64)> = (0..=days_max)
        .map(|d| (d, repetition_willingness(class, Some(f64::from(d) * 86_400.0), &params)))
        .collect();
    to_json(&curve)
}
