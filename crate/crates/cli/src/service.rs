//! HTTP API for live teaching sessions.
//!
//! Sessions live in memory and are evicted after an idle timeout; only the
//! preference store is durable. Each session admits one utterance at a
//! time: a second request while the agent is acting gets 409.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use pref_teach::domain::{ActionKind, ArgumentBinding, Dialogue};
use pref_teach::kb::{KbFilter, PrefDelta, PreferenceRecord};
use pref_teach::manager::{AgentStep, ManagerError, Phase, SessionState};
use serde::{Deserialize, Serialize};

use crate::config::{Engine, ServiceConfig};

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError { status, message: message.into() }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, message)
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("unknown session `{id}`"))
    }
}

impl From<JsonRejection> for ApiError {
    fn from(r: JsonRejection) -> Self {
        Self::bad_request(r.body_text())
    }
}

impl From<ManagerError> for ApiError {
    fn from(e: ManagerError) -> Self {
        let status = match e {
            ManagerError::NotAwaitingUser(_) => StatusCode::CONFLICT,
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        Self::new(status, e.to_string())
    }
}

impl From<pref_teach::kb::KbError> for ApiError {
    fn from(e: pref_teach::kb::KbError) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody { error: self.message })).into_response()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CreateSession {
    pub user_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionCreated {
    pub session_id: String,
    pub user_id: String,
    pub phase: Phase,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceRequest {
    pub text: String,
}

/// One agent step as reported to clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub kind: ActionKind,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    /// Predicted probability of this action; absent for fallback steps the
    /// manager inserts on its own.
    pub confidence: Option<f64>,
    pub n_best: Vec<(String, f64)>,
    pub args: BTreeMap<String, ArgumentBinding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result_ref: Option<String>,
    pub kb_changes: usize,
}

impl From<AgentStep> for StepView {
    fn from(s: AgentStep) -> Self {
        let confidence = s.n_best.first().filter(|(n, _)| n == &s.name).map(|(_, p)| *p);
        StepView {
            kind: s.kind,
            name: s.name,
            text: s.text,
            confidence,
            n_best: s.n_best,
            args: s.args,
            result_ref: s.result_ref,
            kb_changes: s.kb_changes,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UtteranceResponse {
    pub agent_steps: Vec<StepView>,
    pub phase: Phase,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub user_id: String,
    pub phase: Phase,
    pub transcript: Dialogue,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResetRequest {
    pub confirm: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResetResponse {
    pub user_id: String,
    pub deleted: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Health {
    pub status: String,
    pub schema_fingerprint: String,
    pub sessions: usize,
}

struct Slot {
    state: SessionState,
    last_used: Instant,
}

#[derive(Debug, Clone, Copy)]
pub struct Limits {
    pub max_sessions: usize,
    pub idle: Duration,
}

impl Default for Limits {
    fn default() -> Self {
        Limits { max_sessions: 1024, idle: Duration::from_secs(1800) }
    }
}

impl From<&ServiceConfig> for Limits {
    fn from(c: &ServiceConfig) -> Self {
        Limits { max_sessions: c.max_sessions, idle: Duration::from_secs(c.session_idle_secs) }
    }
}

type SharedSlot = Arc<tokio::sync::Mutex<Slot>>;

pub struct AppState {
    pub engine: Engine,
    pub limits: Limits,
    sessions: Mutex<HashMap<String, SharedSlot>>,
}

impl AppState {
    pub fn new(engine: Engine, limits: Limits) -> Arc<Self> {
        Arc::new(AppState { engine, limits, sessions: Mutex::new(HashMap::new()) })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().len()
    }

    fn slot(&self, id: &str) -> Result<SharedSlot, ApiError> {
        self.sessions.lock().get(id).cloned().ok_or_else(|| ApiError::unknown_session(id))
    }

    /// Drops sessions idle for longer than the limit. Sessions with a
    /// request in flight are kept.
    pub fn evict_idle(&self) -> usize {
        let idle = self.limits.idle;
        let mut sessions = self.sessions.lock();
        let before = sessions.len();
        sessions.retain(|_, slot| match slot.try_lock() {
            Ok(s) => s.last_used.elapsed() < idle,
            Err(_) => true,
        });
        before - sessions.len()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/session", post(create_session))
        .route("/api/session/{id}", get(get_session))
        .route("/api/session/{id}/utterance", post(utterance))
        .route("/api/preferences/{user_id}", get(preferences))
        .route("/api/preferences/{user_id}/reset", post(reset))
        .route("/api/health", get(health))
        .with_state(state)
}

async fn create_session(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateSession>, JsonRejection>,
) -> Result<Json<SessionCreated>, ApiError> {
    let Json(req) = body?;
    let user_id = req.user_id.trim().to_string();
    if user_id.is_empty() {
        return Err(ApiError::bad_request("user_id must not be empty"));
    }
    if app.session_count() >= app.limits.max_sessions {
        app.evict_idle();
    }
    let state = SessionState::new(user_id);
    let created = SessionCreated { session_id: state.session_id.clone(), user_id: state.user_id.clone(), phase: state.phase };
    let mut sessions = app.sessions.lock();
    if sessions.len() >= app.limits.max_sessions {
        return Err(ApiError::new(StatusCode::SERVICE_UNAVAILABLE, "session limit reached"));
    }
    sessions.insert(created.session_id.clone(), Arc::new(tokio::sync::Mutex::new(Slot { state, last_used: Instant::now() })));
    Ok(Json(created))
}

async fn utterance(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<UtteranceRequest>, JsonRejection>,
) -> Result<Json<UtteranceResponse>, ApiError> {
    let slot = app.slot(&id)?;
    let Json(req) = body?;
    if req.text.trim().is_empty() {
        return Err(ApiError::bad_request("text must not be empty"));
    }
    let mut guard = slot
        .try_lock_owned()
        .map_err(|_| ApiError::new(StatusCode::CONFLICT, format!("session `{id}` is {:?}", Phase::AgentActing)))?;
    if guard.state.phase != Phase::AwaitUser {
        return Err(ApiError::new(StatusCode::CONFLICT, format!("session `{id}` is {:?}", guard.state.phase)));
    }
    let engine = app.engine.clone();
    let (guard, result) = tokio::task::spawn_blocking(move || {
        let result = engine.turn(&mut guard.state, &req.text);
        guard.last_used = Instant::now();
        (guard, result)
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    let steps = result?;
    Ok(Json(UtteranceResponse { agent_steps: steps.into_iter().map(StepView::from).collect(), phase: guard.state.phase }))
}

async fn get_session(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    let slot = app.slot(&id)?;
    let s = slot.lock().await;
    Ok(Json(SessionView {
        session_id: s.state.session_id.clone(),
        user_id: s.state.user_id.clone(),
        phase: s.state.phase,
        transcript: s.state.transcript(),
    }))
}

async fn preferences(State(app): State<Arc<AppState>>, Path(user_id): Path<String>) -> Result<Json<Vec<PreferenceRecord>>, ApiError> {
    Ok(Json(app.engine.store.retrieve_kb(&user_id, &KbFilter::default())?))
}

async fn reset(
    State(app): State<Arc<AppState>>,
    Path(user_id): Path<String>,
    body: Result<Json<ResetRequest>, JsonRejection>,
) -> Result<Json<ResetResponse>, ApiError> {
    let Json(req) = body?;
    if !req.confirm {
        return Err(ApiError::bad_request("reset requires confirm: true"));
    }
    let deleted = app.engine.store.update_kb(&user_id, &[PrefDelta::DeleteAll])?;
    Ok(Json(ResetResponse { user_id, deleted }))
}

async fn health(State(app): State<Arc<AppState>>) -> Json<Health> {
    Json(Health { status: "ok".into(), schema_fingerprint: app.engine.schema.fingerprint(), sessions: app.session_count() })
}

/// Binds `config.bind` and serves until Ctrl-C.
pub async fn serve(config: &ServiceConfig, engine: Engine) -> anyhow::Result<()> {
    let app = AppState::new(engine, Limits::from(config));
    let sweeper = app.clone();
    let period = (sweeper.limits.idle / 4).max(Duration::from_secs(1));
    tokio::spawn(async move {
        let mut tick = tokio::time::interval(period);
        loop {
            tick.tick().await;
            let n = sweeper.evict_idle();
            if n > 0 {
                tracing::info!(evicted = n, "dropped idle sessions");
            }
        }
    });
    let listener = tokio::net::TcpListener::bind(&config.bind).await?;
    tracing::info!(addr = %listener.local_addr()?, "listening");
    axum::serve(listener, router(app))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
