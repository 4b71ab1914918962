//! HTTP session service. Each session is the same in-process state machine
//! the simulator drives; the service only routes messages to it.
//!
//! ```text
//! POST /sessions                 {seed?}                      -> {session_id, seed}
//! GET  /sessions/{id}/next                                    -> question | recommendation | finished
//! POST /sessions/{id}/answer     {value: "yes"|"no"}          -> {ok, turn}
//! POST /sessions/{id}/feedback   {value: "accept"|"reject", item_id?} -> {ok, status, turn}
//! GET  /sessions/{id}/state                                   -> session view
//! GET  /model/info                                            -> model summary
//! ```
//!
//! Unknown sessions give 404, messages that do not match the pending action
//! give 409, sessions idle past the timeout give 410.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::Write;
use std::net::SocketAddr;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use fact_crs::forest::InteractionForest;
use fact_crs::policy::{AblationFlags, AgentAction, PolicyConfig, Session, SessionStatus, TurnRecord, UserFeedback};
use fact_crs::{AttrId, ItemId};
use serde::{Deserialize, Serialize};
use serde_json::json;
use uuid::Uuid;

pub const DEFAULT_IDLE_TIMEOUT: Duration = Duration::from_secs(30 * 60);

#[derive(Clone, Debug)]
pub struct ServiceConfig {
    pub policy: PolicyConfig,
    pub flags: AblationFlags,
    pub idle_timeout: Duration,
}

impl ServiceConfig {
    pub fn new(policy: PolicyConfig) -> Self {
        ServiceConfig {
            policy,
            flags: AblationFlags::default(),
            idle_timeout: DEFAULT_IDLE_TIMEOUT,
        }
    }
}

struct Entry {
    session: Session,
    seed: u64,
    created: SystemTime,
    last_seen: Instant,
}

struct Registry {
    live: HashMap<Uuid, Arc<Mutex<Entry>>>,
    expired: HashSet<Uuid>,
}

pub struct AppState {
    forest: Arc<InteractionForest>,
    config: ServiceConfig,
    registry: Mutex<Registry>,
    log: Option<Mutex<File>>,
}

impl AppState {
    pub fn new(forest: Arc<InteractionForest>, config: ServiceConfig) -> Self {
        AppState {
            forest,
            config,
            registry: Mutex::new(Registry {
                live: HashMap::new(),
                expired: HashSet::new(),
            }),
            log: None,
        }
    }

    /// Append every incoming message, before it is applied, to `path` as
    /// one JSON object per line.
    pub fn with_session_log(mut self, path: &Path) -> std::io::Result<Self> {
        let file = File::options().create(true).append(true).open(path)?;
        self.log = Some(Mutex::new(file));
        Ok(self)
    }

    fn write_log(&self, id: Uuid, event: &str, body: serde_json::Value) {
        if let Some(log) = &self.log {
            let ms = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map_or(0, |d| d.as_millis());
            let line = json!({"time_ms": ms, "session_id": id.to_string(), "event": event, "body": body});
            let mut f = log.lock().unwrap();
            if let Err(e) = writeln!(f, "{line}") {
                log::warn!("session log write failed: {e}");
            }
        }
    }

    /// Drop sessions idle past the timeout, remembering their ids.
    pub fn sweep(&self) -> usize {
        let now = Instant::now();
        let mut reg = self.registry.lock().unwrap();
        let stale: Vec<Uuid> = reg
            .live
            .iter()
            .filter(|(_, e)| now.duration_since(e.lock().unwrap().last_seen) > self.config.idle_timeout)
            .map(|(id, _)| *id)
            .collect();
        for id in &stale {
            reg.live.remove(id);
            reg.expired.insert(*id);
        }
        stale.len()
    }

    pub fn live_sessions(&self) -> usize {
        self.registry.lock().unwrap().live.len()
    }

    fn lookup(&self, raw: &str) -> Result<(Uuid, Arc<Mutex<Entry>>), ApiError> {
        let id = Uuid::parse_str(raw).map_err(|_| ApiError::NotFound)?;
        let mut reg = self.registry.lock().unwrap();
        if reg.expired.contains(&id) {
            return Err(ApiError::Expired);
        }
        let entry = reg.live.get(&id).cloned().ok_or(ApiError::NotFound)?;
        let idle = entry.lock().unwrap().last_seen.elapsed();
        if idle > self.config.idle_timeout {
            reg.live.remove(&id);
            reg.expired.insert(id);
            return Err(ApiError::Expired);
        }
        Ok((id, entry))
    }
}

#[derive(Debug)]
enum ApiError {
    NotFound,
    Expired,
    Conflict(String),
    Invalid(String),
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (code, msg) = match self {
            ApiError::NotFound => (StatusCode::NOT_FOUND, "unknown session".to_string()),
            ApiError::Expired => (StatusCode::GONE, "session expired".to_string()),
            ApiError::Conflict(m) => (StatusCode::CONFLICT, m),
            ApiError::Invalid(m) => (StatusCode::UNPROCESSABLE_ENTITY, m),
        };
        (code, Json(json!({ "error": msg }))).into_response()
    }
}

#[derive(Debug, Default, Deserialize)]
struct CreateRequest {
    seed: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CreateResponse {
    pub session_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedItem {
    pub item_id: ItemId,
    pub rank: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum NextResponse {
    Question {
        attribute_id: AttrId,
        label: String,
        turn: usize,
    },
    Recommendation {
        items: Vec<RankedItem>,
        turn: usize,
    },
    Finished {
        status: SessionStatus,
        turn: usize,
    },
}

#[derive(Debug, Deserialize)]
struct AnswerRequest {
    value: String,
}

#[derive(Debug, Deserialize)]
struct FeedbackRequest {
    value: String,
    item_id: Option<ItemId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerView {
    pub attribute_id: AttrId,
    pub label: String,
    pub value: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateView {
    pub session_id: String,
    pub seed: u64,
    pub created_unix_ms: u128,
    pub status: SessionStatus,
    pub turn: usize,
    pub max_turns: usize,
    pub turns_used: Option<usize>,
    pub answers: Vec<AnswerView>,
    pub excluded_count: usize,
    pub visited_trees: Vec<usize>,
    pub current_tree: Option<usize>,
    pub delta: Vec<f64>,
    pub history: Vec<TurnRecord>,
}

fn label(forest: &InteractionForest, a: AttrId) -> String {
    forest.vocabulary.label(a).unwrap_or("?").to_string()
}

/// The wire form of the session's current action.
pub fn next_view(session: &mut Session) -> NextResponse {
    let forest = session.forest().clone();
    match session.current_action() {
        Some(AgentAction::Ask { attribute }) => NextResponse::Question {
            attribute_id: attribute,
            label: label(&forest, attribute),
            turn: session.turn(),
        },
        Some(AgentAction::Recommend { items }) => NextResponse::Recommendation {
            items: items
                .iter()
                .enumerate()
                .map(|(r, x)| RankedItem {
                    item_id: x.item,
                    rank: r + 1,
                    score: x.score,
                })
                .collect(),
            turn: session.turn(),
        },
        None => NextResponse::Finished {
            status: session.status(),
            turn: session.turns_used().unwrap_or(session.turn()),
        },
    }
}

fn state_view(id: Uuid, entry: &Entry) -> StateView {
    let s = &entry.session;
    let st = s.state();
    StateView {
        session_id: id.to_string(),
        seed: entry.seed,
        created_unix_ms: entry
            .created
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_millis()),
        status: st.status,
        turn: st.turn,
        max_turns: s.config().max_turns,
        turns_used: st.turns_used,
        answers: st
            .answers
            .iter()
            .map(|(&a, &v)| AnswerView {
                attribute_id: a,
                label: label(s.forest(), a),
                value: v,
            })
            .collect(),
        excluded_count: st.excluded_items.len(),
        visited_trees: st.visited_trees.clone(),
        current_tree: st.current_tree,
        delta: st.delta.clone(),
        history: s.history().to_vec(),
    }
}

fn parse_json<T: for<'de> Deserialize<'de> + Default>(body: &Bytes) -> Result<T, ApiError> {
    if body.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(body).map_err(|e| ApiError::Invalid(e.to_string()))
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Result<Response, ApiError> {
    let req: CreateRequest = parse_json(&body)?;
    let id = Uuid::new_v4();
    let seed = req.seed.unwrap_or_else(|| id.as_u64_pair().0);
    app.write_log(id, "create", json!({ "seed": seed }));
    let session = Session::start(app.forest.clone(), app.config.policy.clone(), app.config.flags, seed);
    let entry = Entry {
        session,
        seed,
        created: SystemTime::now(),
        last_seen: Instant::now(),
    };
    app.registry
        .lock()
        .unwrap()
        .live
        .insert(id, Arc::new(Mutex::new(entry)));
    let body = CreateResponse {
        session_id: id.to_string(),
        seed,
    };
    Ok((StatusCode::CREATED, Json(body)).into_response())
}

async fn next_action(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<NextResponse>, ApiError> {
    let (_, entry) = app.lookup(&id)?;
    let mut e = entry.lock().unwrap();
    e.last_seen = Instant::now();
    Ok(Json(next_view(&mut e.session)))
}

async fn answer(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    let (uuid, entry) = app.lookup(&id)?;
    let req: AnswerRequest = serde_json::from_slice(&body).map_err(|e| ApiError::Invalid(e.to_string()))?;
    let yes = match req.value.as_str() {
        "yes" => true,
        "no" => false,
        other => return Err(ApiError::Invalid(format!("value must be yes or no, got `{other}`"))),
    };
    app.write_log(uuid, "answer", json!({ "value": req.value }));
    let mut e = entry.lock().unwrap();
    e.last_seen = Instant::now();
    e.session
        .apply_answer(yes)
        .map_err(|err| ApiError::Conflict(err.to_string()))?;
    Ok(Json(json!({ "ok": true, "turn": e.session.turn() })))
}

async fn feedback(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    let (uuid, entry) = app.lookup(&id)?;
    let req: FeedbackRequest = serde_json::from_slice(&body).map_err(|e| ApiError::Invalid(e.to_string()))?;
    let fb = match req.value.as_str() {
        "accept" => UserFeedback::Accept,
        "reject" => UserFeedback::Reject,
        other => return Err(ApiError::Invalid(format!("value must be accept or reject, got `{other}`"))),
    };
    app.write_log(uuid, "feedback", json!({ "value": req.value, "item_id": req.item_id }));
    let mut e = entry.lock().unwrap();
    e.last_seen = Instant::now();
    if let (UserFeedback::Accept, Some(item), Some(AgentAction::Recommend { items })) =
        (fb, req.item_id, e.session.pending())
    {
        if !items.iter().any(|x| x.item == item) {
            return Err(ApiError::Invalid(format!("item {item} is not in the current list")));
        }
    }
    let status = e
        .session
        .respond(fb)
        .map_err(|err| ApiError::Conflict(err.to_string()))?;
    let turn = e.session.turns_used().unwrap_or(e.session.turn());
    Ok(Json(json!({ "ok": true, "status": status, "turn": turn })))
}

async fn session_state(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Json<StateView>, ApiError> {
    let (uuid, entry) = app.lookup(&id)?;
    let mut e = entry.lock().unwrap();
    e.last_seen = Instant::now();
    Ok(Json(state_view(uuid, &e)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub trees: usize,
    pub items: usize,
    pub attributes: usize,
    pub dim: usize,
    pub nodes_per_tree: Vec<usize>,
    pub depth_per_tree: Vec<usize>,
    pub labels: Vec<String>,
    pub top_k: usize,
    pub max_turns: usize,
    pub config: BTreeMap<String, String>,
}

pub fn model_info(forest: &InteractionForest, policy: &PolicyConfig) -> ModelInfo {
    ModelInfo {
        trees: forest.trees.len(),
        items: forest.num_items(),
        attributes: forest.num_attributes(),
        dim: forest.dim(),
        nodes_per_tree: forest.trees.iter().map(|t| t.nodes.len()).collect(),
        depth_per_tree: forest.trees.iter().map(|t| t.depth()).collect(),
        labels: forest.vocabulary.names().to_vec(),
        top_k: policy.k,
        max_turns: policy.max_turns,
        config: forest
            .config
            .to_text()
            .lines()
            .filter_map(|l| l.split_once(" = "))
            .map(|(k, v)| (k.to_string(), v.to_string()))
            .collect(),
    }
}

async fn info(State(app): State<Arc<AppState>>) -> Json<ModelInfo> {
    Json(model_info(&app.forest, &app.config.policy))
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/next", get(next_action))
        .route("/sessions/{id}/answer", post(answer))
        .route("/sessions/{id}/feedback", post(feedback))
        .route("/sessions/{id}/state", get(session_state))
        .route("/model/info", get(info))
        .with_state(state)
}

/// Serve until the listener fails. Expired sessions are swept once a minute
/// (or at the idle timeout, if shorter).
pub async fn serve(listener: tokio::net::TcpListener, state: Arc<AppState>) -> std::io::Result<()> {
    let sweeper = state.clone();
    let period = state.config.idle_timeout.min(Duration::from_secs(60)).max(Duration::from_millis(10));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.sweep();
            if n > 0 {
                log::info!("expired {n} idle sessions");
            }
        }
    });
    axum::serve(listener, router(state)).await
}

pub async fn bind(addr: SocketAddr) -> std::io::Result<tokio::net::TcpListener> {
    tokio::net::TcpListener::bind(addr).await
}
