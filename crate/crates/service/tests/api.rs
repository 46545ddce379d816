use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use ontorec::ontology::OntologyGraph;
use ontorec_service::{router, AppState, ServiceConfig, SharedState, API_KEY_HEADER};

fn app(cfg: ServiceConfig) -> SharedState {
    AppState::open(OntologyGraph::fixture(), cfg).unwrap()
}

async fn call(state: &SharedState, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let req = match body {
        Some(b) => req.body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    raw(state, req).await
}

async fn raw(state: &SharedState, req: Request<Body>) -> (StatusCode, Value) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

fn user(id: u32) -> Value {
    json!({
        "id": id, "age": 34, "ac_deg": 3, "budget": 2, "accom": 2,
        "gender": "Female", "job": "white collar", "region": "Asia", "group_comp": "2Adlt"
    })
}

#[tokio::test]
async fn user_creation_and_error_codes() {
    let s = app(ServiceConfig::default());
    let (st, body) = call(&s, "POST", "/users", Some(user(4))).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(body["id"], 4);
    let (st, _) = call(&s, "POST", "/users", Some(user(4))).await;
    assert_eq!(st, StatusCode::CONFLICT);

    let mut anon = user(0);
    anon.as_object_mut().unwrap().remove("id");
    let (st, body) = call(&s, "POST", "/users", Some(anon)).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(body["id"], 5);

    let req = Request::post("/users").body(Body::from("{not json")).unwrap();
    assert_eq!(raw(&s, req).await.0, StatusCode::BAD_REQUEST);
    let mut bad = user(9);
    bad["gender"] = json!("Robot");
    assert_eq!(call(&s, "POST", "/users", Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&s, "GET", "/users/77/profile", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn leisure_selection_gets_leisure_items_with_pagination() {
    let s = app(ServiceConfig::default());
    let mut u = user(0);
    u["selection"] = json!(["Leisure"]);
    call(&s, "POST", "/users", Some(u)).await;
    let (st, body) = call(&s, "GET", "/users/0/recommendations?n=5&weather=rainy", None).await;
    assert_eq!(st, StatusCode::OK);
    assert_eq!(body["phase"], 1);
    assert_eq!(body["total"], 5);
    let ids: Vec<u64> = body["items"].as_array().unwrap().iter().map(|r| r["item"].as_u64().unwrap()).collect();
    assert_eq!(ids.len(), 5);

    let (_, page) = call(&s, "GET", "/users/0/recommendations?n=5&offset=2&limit=2", None).await;
    let page_ids: Vec<u64> = page["items"].as_array().unwrap().iter().map(|r| r["item"].as_u64().unwrap()).collect();
    let (_, plain) = call(&s, "GET", "/users/0/recommendations?n=5", None).await;
    let plain_ids: Vec<u64> = plain["items"].as_array().unwrap().iter().map(|r| r["item"].as_u64().unwrap()).collect();
    assert_eq!(page_ids, plain_ids[2..4]);

    assert_eq!(call(&s, "GET", "/users/0/recommendations?weather=snow", None).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(call(&s, "GET", "/users/0/recommendations?n=0", None).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(call(&s, "GET", "/users/3/recommendations", None).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn dismiss_removes_item_and_applies_trickle_up() {
    let s = app(ServiceConfig::default());
    let mut u = user(0);
    u["selection"] = json!(["Leisure"]);
    call(&s, "POST", "/users", Some(u)).await;
    let (_, before) = call(&s, "GET", "/users/0/profile", None).await;
    let (_, recs) = call(&s, "GET", "/users/0/recommendations?n=5&now=0", None).await;
    let top = recs["items"][0]["item"].as_u64().unwrap();

    let (st, _) = call(&s, "POST", "/users/0/feedback", Some(json!({"item": top, "kind": "dismiss"}))).await;
    assert_eq!(st, StatusCode::NO_CONTENT);
    let (_, after_recs) = call(&s, "GET", "/users/0/recommendations?n=5&now=0", None).await;
    assert!(after_recs["items"].as_array().unwrap().iter().all(|r| r["item"].as_u64() != Some(top)));

    // each LL class of the item drops by eta_ll = 0.2, others stay put
    let (_, after) = call(&s, "GET", "/users/0/profile", None).await;
    let graph = OntologyGraph::fixture();
    let classes = graph.item_classes(ontorec::ItemId(top as u32));
    for (label, v) in after["ll"].as_object().unwrap() {
        let old = before["ll"][label].as_f64().unwrap();
        let want = if classes.contains(&label.as_str()) { (old - 0.2).max(0.0) } else { old };
        assert!((v.as_f64().unwrap() - want).abs() < 1e-12, "{label}: {old} -> {v}, want {want}");
    }
}

#[tokio::test]
async fn ratings_validate_range_and_advance_phase() {
    let s = app(ServiceConfig::default());
    call(&s, "POST", "/users", Some(user(0))).await;
    let (_, p) = call(&s, "GET", "/admin/phase", None).await;
    assert_eq!(p["phase"], 1);
    let bad = json!({"item": 3, "rating": 7.5});
    assert_eq!(call(&s, "POST", "/users/0/ratings", Some(bad)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let unknown = json!({"item": 999, "rating": 4});
    assert_eq!(call(&s, "POST", "/users/0/ratings", Some(unknown)).await.0, StatusCode::NOT_FOUND);
    let ok = json!({"item": 3, "rating": 4.5, "timestamp": 10});
    assert_eq!(call(&s, "POST", "/users/0/ratings", Some(ok)).await.0, StatusCode::NO_CONTENT);
    let (_, p) = call(&s, "GET", "/admin/phase", None).await;
    assert_eq!(p["phase"], 2);
    assert_eq!(p["ratings"], 1);
    assert!(p["weights"]["hybrid"].as_f64().unwrap() > 0.99);
}

#[tokio::test]
async fn item_admin_bins_and_preview_does_not_mutate() {
    let s = app(ServiceConfig::default());
    let golf = json!({"id": 100, "name": "Links day", "description": "golf course with club rental"});
    let (st, preview) = call(&s, "POST", "/admin/items/bin", Some(golf.clone())).await;
    assert_eq!(st, StatusCode::OK);
    let (_, m) = call(&s, "GET", "/admin/metrics", None).await;
    assert_eq!(m["items"], 29);

    let (st, added) = call(&s, "POST", "/admin/items", Some(golf.clone())).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(added["links"], preview["links"]);
    assert_eq!(call(&s, "POST", "/admin/items", Some(golf)).await.0, StatusCode::CONFLICT);

    let tagged = json!({"id": 101, "name": "Spa", "categories": ["Wellness"]});
    let (st, added) = call(&s, "POST", "/admin/items", Some(tagged)).await;
    assert_eq!(st, StatusCode::CREATED);
    assert_eq!(added["links"][0]["class"], "Wellness");
    let bogus = json!({"id": 102, "name": "x", "categories": ["No Such Class"]});
    assert_eq!(call(&s, "POST", "/admin/items", Some(bogus)).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let (_, m) = call(&s, "GET", "/admin/metrics", None).await;
    assert_eq!(m["items"], 31);
}

#[tokio::test]
async fn api_key_is_enforced() {
    let s = app(ServiceConfig { api_key: Some("sesame".into()), ..Default::default() });
    assert_eq!(call(&s, "GET", "/admin/phase", None).await.0, StatusCode::UNAUTHORIZED);
    let req = Request::get("/admin/phase").header(API_KEY_HEADER, "sesame").body(Body::empty()).unwrap();
    assert_eq!(raw(&s, req).await.0, StatusCode::OK);
}

#[tokio::test]
async fn reads_do_not_mutate() {
    let s = app(ServiceConfig::default());
    call(&s, "POST", "/users", Some(user(0))).await;
    let before = s.state_json().await;
    call(&s, "GET", "/users/0/recommendations?n=8&weather=sunny&lat=38.7&lon=-9.1", None).await;
    call(&s, "GET", "/users/0/profile", None).await;
    call(&s, "GET", "/admin/phase", None).await;
    call(&s, "GET", "/admin/metrics", None).await;
    assert_eq!(before, s.state_json().await);
}

#[tokio::test]
async fn restart_replays_log_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ServiceConfig {
        log_path: Some(dir.path().join("events.log")),
        snapshot_path: Some(dir.path().join("state.snap")),
        snapshot_every: 3,
        ..Default::default()
    };
    let s = app(cfg.clone());
    for id in 0..4 {
        call(&s, "POST", "/users", Some(user(id))).await;
    }
    call(&s, "POST", "/users/1/ratings", Some(json!({"item": 2, "rating": 5, "timestamp": 1}))).await;
    call(&s, "POST", "/users/2/feedback", Some(json!({"item": 6, "kind": "book", "timestamp": 2}))).await;
    call(&s, "POST", "/admin/items", Some(json!({"id": 200, "name": "Tour", "description": "museum visit"}))).await;
    // rejected requests never reach the log
    call(&s, "POST", "/users/9/ratings", Some(json!({"item": 2, "rating": 5}))).await;
    let (_, m) = call(&s, "GET", "/admin/metrics", None).await;
    assert_eq!(m["log_next_seq"], 8);
    assert!(dir.path().join("state.snap").exists());
    let live = s.state_json().await;
    drop(s);

    let reopened = app(cfg.clone());
    assert_eq!(live, reopened.state_json().await);
    let log_only = app(ServiceConfig { snapshot_path: None, ..cfg });
    assert_eq!(live, log_only.state_json().await);
}
