use std::sync::{Arc, OnceLock};
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use fact_crs::policy::PolicyConfig;
use fact_crs::{generate_synthetic, split_by_user, train_forest, InteractionForest, RunConfig, SyntheticSpec};
use fact_crs_cli::server::{router, AppState, ModelInfo, NextResponse, ServiceConfig, StateView};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn forest() -> Arc<InteractionForest> {
    static F: OnceLock<Arc<InteractionForest>> = OnceLock::new();
    F.get_or_init(|| {
        let spec = SyntheticSpec::new(30, 20, 5, 250).depth(2).seed(4);
        let (ds, _) = generate_synthetic(&spec).unwrap();
        let split = split_by_user(&ds, 2).unwrap();
        let mut cfg = RunConfig::default();
        cfg.forest.dim = 8;
        cfg.forest.num_trees = 3;
        cfg.optimizer.epochs_commit = 30;
        Arc::new(train_forest(&ds, &split, &cfg).unwrap().0)
    })
    .clone()
}

fn app_with(policy: PolicyConfig, idle: Duration) -> (Router, Arc<AppState>) {
    let mut config = ServiceConfig::new(policy);
    config.idle_timeout = idle;
    let state = Arc::new(AppState::new(forest(), config));
    (router(state.clone()), state)
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, value)
}

async fn create(app: &Router, seed: u64) -> String {
    let (status, body) = call(app, Method::POST, "/sessions", Some(json!({ "seed": seed }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["seed"], seed);
    body["session_id"].as_str().unwrap().to_string()
}

#[tokio::test]
async fn next_is_a_tagged_union() {
    let (app, _) = app_with(PolicyConfig { eta: 0, ..Default::default() }, Duration::from_secs(60));
    let id = create(&app, 1).await;
    let (status, body) = call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["type"], "question");
    assert_eq!(body["turn"], 1);
    let next: NextResponse = serde_json::from_value(body).unwrap();
    assert!(matches!(next, NextResponse::Question { .. }));

    // Polling again returns the same pending question.
    let (_, again) = call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(serde_json::from_value::<NextResponse>(again).unwrap(), next);

    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/answer"), Some(json!({ "value": "yes" }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["turn"], 2);
    let (_, state) = call(&app, Method::GET, &format!("/sessions/{id}/state"), None).await;
    let state: StateView = serde_json::from_value(state).unwrap();
    assert_eq!(state.answers.len(), 1);
    assert!(state.answers[0].value);
}

#[tokio::test]
async fn answering_a_recommendation_conflicts_and_leaves_state_alone() {
    let (app, _) = app_with(PolicyConfig { eta: 1000, ..Default::default() }, Duration::from_secs(60));
    let id = create(&app, 2).await;
    let (_, next) = call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(next["type"], "recommendation");
    let items = next["items"].as_array().unwrap();
    assert_eq!(items.len(), 10);
    assert_eq!(items[0]["rank"], 1);
    let (_, before) = call(&app, Method::GET, &format!("/sessions/{id}/state"), None).await;

    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/answer"), Some(json!({ "value": "no" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert!(body["error"].is_string());
    let (_, after) = call(&app, Method::GET, &format!("/sessions/{id}/state"), None).await;
    assert_eq!(before, after);

    // Accepting an item outside the list is rejected without effect.
    let listed: Vec<u64> = items.iter().map(|x| x["item_id"].as_u64().unwrap()).collect();
    let outside = (0..20).find(|i| !listed.contains(i)).unwrap();
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/feedback"), Some(json!({ "value": "accept", "item_id": outside }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    let (status, body) = call(&app, Method::POST, &format!("/sessions/{id}/feedback"), Some(json!({ "value": "accept", "item_id": listed[0] }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "succeeded");
    assert_eq!(body["turn"], 1);
    let (_, next) = call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(next, json!({ "type": "finished", "status": "succeeded", "turn": 1 }));
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/feedback"), Some(json!({ "value": "reject" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn rejections_run_out_the_budget() {
    let (app, _) = app_with(PolicyConfig { eta: 1000, max_turns: 3, k: 2, ..Default::default() }, Duration::from_secs(60));
    let id = create(&app, 3).await;
    for _ in 0..3 {
        let (_, next) = call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
        assert_eq!(next["type"], "recommendation");
        let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/feedback"), Some(json!({ "value": "reject" }))).await;
        assert_eq!(status, StatusCode::OK);
    }
    let (_, state) = call(&app, Method::GET, &format!("/sessions/{id}/state"), None).await;
    let state: StateView = serde_json::from_value(state).unwrap();
    assert_eq!(state.turns_used, Some(3));
    assert_eq!(state.excluded_count, 6);
    assert_eq!(state.history.len(), 3);
}

#[tokio::test]
async fn unknown_invalid_and_expired_sessions() {
    let (app, state) = app_with(PolicyConfig::default(), Duration::from_millis(50));
    let (status, body) = call(&app, Method::GET, "/sessions/not-a-uuid/next", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert!(body["error"].is_string());
    let (status, _) = call(&app, Method::GET, "/sessions/00000000-0000-4000-8000-000000000000/state", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    let id = create(&app, 4).await;
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/answer"), Some(json!({ "value": "maybe" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    let (status, _) = call(&app, Method::POST, &format!("/sessions/{id}/feedback"), Some(json!({ "verdict": "reject" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);

    tokio::time::sleep(Duration::from_millis(80)).await;
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    assert_eq!(status, StatusCode::GONE);
    assert_eq!(state.live_sessions(), 0);

    let other = create(&app, 5).await;
    tokio::time::sleep(Duration::from_millis(80)).await;
    assert_eq!(state.sweep(), 1);
    let (status, _) = call(&app, Method::GET, &format!("/sessions/{other}/state"), None).await;
    assert_eq!(status, StatusCode::GONE);
}

#[tokio::test]
async fn model_info_describes_the_forest() {
    let (app, _) = app_with(PolicyConfig::default(), Duration::from_secs(60));
    let (status, body) = call(&app, Method::GET, "/model/info", None).await;
    assert_eq!(status, StatusCode::OK);
    let info: ModelInfo = serde_json::from_value(body).unwrap();
    assert_eq!(info.trees, 3);
    assert_eq!(info.items, 20);
}

#[tokio::test]
async fn session_log_records_messages_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sessions.jsonl");
    let state = AppState::new(forest(), ServiceConfig::new(PolicyConfig { eta: 1000, ..Default::default() }))
        .with_session_log(&path)
        .unwrap();
    let app = router(Arc::new(state));
    let id = create(&app, 6).await;
    call(&app, Method::GET, &format!("/sessions/{id}/next"), None).await;
    call(&app, Method::POST, &format!("/sessions/{id}/feedback"), Some(json!({ "value": "reject" }))).await;
    let lines: Vec<Value> = std::fs::read_to_string(&path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    let events: Vec<&str> = lines.iter().map(|l| l["event"].as_str().unwrap()).collect();
    assert_eq!(events, ["create", "feedback"]);
    assert!(lines.iter().all(|l| l["session_id"] == id.as_str()));
    assert_eq!(lines[0]["body"]["seed"], 6);
}
