//! Session API under `/v1`.
//!
//! Sessions live in memory. Each one sits behind its own mutex, so events for
//! one session are applied in order while different sessions run in
//! parallel. An event is applied to a copy of the state and committed only
//! when the engine accepts it, so a rejected event leaves the session as it
//! was.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dxloop_core::domain::{CategorySet, ExamCategory, StrategyMask, VisitRecord};
use dxloop_core::error::PolicyError;
use dxloop_core::indicators::{encode_indicator_block, IndicatorTable};
use dxloop_core::policy::{
    Action, DiagnosisModel, InstitutionCapability, PolicyEngine, SessionEvent, SessionStart, SessionState,
    SessionStatus, TrailEntry,
};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

/// Body of `POST /v1/sessions`. Without `base_block` the base block is
/// encoded from the named Base indicators.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartRequest {
    #[serde(default)]
    pub subject_id: Option<String>,
    #[serde(default)]
    pub visit_index: u32,
    #[serde(default)]
    pub history: Vec<VisitRecord>,
    #[serde(default)]
    pub base_block: Option<Vec<f64>>,
    #[serde(default)]
    pub indicators: BTreeMap<String, f64>,
    /// Categories the institution can perform; all of them when absent.
    #[serde(default)]
    pub capability: Option<CategorySet>,
}

/// Body of `POST /v1/sessions/{id}/events`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum EventRequest {
    ExamResult {
        category: ExamCategory,
        #[serde(default)]
        block: Option<Vec<f64>>,
        #[serde(default)]
        indicators: BTreeMap<String, f64>,
    },
    ExamUnavailable {
        category: ExamCategory,
    },
}

/// What every session endpoint returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub status: SessionStatus,
    pub action: Action,
    pub acquired: StrategyMask,
    pub requested: CategorySet,
    pub refused: CategorySet,
    pub trail: Vec<TrailEntry>,
}

impl SessionView {
    pub fn of(state: &SessionState) -> Self {
        let action = state
            .trail
            .last()
            .map(|t| t.action.clone())
            .expect("a started session has at least one trail entry");
        SessionView {
            session_id: state.session_id.clone(),
            status: state.status.clone(),
            action,
            acquired: state.acquired,
            requested: state.requested,
            refused: state.refused,
            trail: state.trail.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: ErrorDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorDetail {
    pub code: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", format!("no session {id}"))
    }
}

impl From<PolicyError> for ApiError {
    fn from(e: PolicyError) -> Self {
        let (status, code) = match &e {
            PolicyError::InvalidCapability => (StatusCode::BAD_REQUEST, "invalid_capability"),
            PolicyError::Domain(_) => (StatusCode::BAD_REQUEST, "invalid_payload"),
            PolicyError::Protocol(_) => (StatusCode::CONFLICT, "protocol"),
            PolicyError::SessionClosed(_) => (StatusCode::CONFLICT, "session_closed"),
            PolicyError::Model(_) => (StatusCode::INTERNAL_SERVER_ERROR, "model"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: ErrorDetail {
                code: self.code.to_string(),
                message: self.message,
            },
        };
        (self.status, Json(body)).into_response()
    }
}

/// Shared server state: the read-only engine and the session table.
pub struct ApiState<M> {
    engine: Arc<PolicyEngine<M>>,
    table: IndicatorTable,
    block_width: usize,
    sessions: RwLock<HashMap<String, Arc<Mutex<SessionState>>>>,
    next_id: AtomicU64,
    audit: Option<Mutex<Box<dyn Write + Send>>>,
}

impl<M: DiagnosisModel + 'static> ApiState<M> {
    /// `block_width` is the width of every examination block the model
    /// expects; it sizes blocks encoded from indicator values.
    pub fn new(engine: PolicyEngine<M>, table: IndicatorTable, block_width: usize) -> Self {
        ApiState {
            engine: Arc::new(engine),
            table,
            block_width,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            audit: None,
        }
    }

    /// Appends one JSON line per accepted request to `sink`.
    pub fn with_audit(mut self, sink: Box<dyn Write + Send>) -> Self {
        self.audit = Some(Mutex::new(sink));
        self
    }

    pub fn engine(&self) -> &PolicyEngine<M> {
        &self.engine
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionState>>, ApiError> {
        self.sessions
            .read()
            .expect("session table lock")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(id))
    }

    fn audit(&self, record: serde_json::Value) {
        let Some(sink) = &self.audit else { return };
        let mut sink = sink.lock().expect("audit lock");
        let written = serde_json::to_writer(&mut *sink, &record)
            .map_err(std::io::Error::from)
            .and_then(|_| sink.write_all(b"\n"))
            .and_then(|_| sink.flush());
        if let Err(e) = written {
            tracing::warn!(error = %e, "audit log write failed");
        }
    }

    fn check_indicators(&self, category: ExamCategory, indicators: &BTreeMap<String, f64>) -> Result<(), ApiError> {
        for (name, value) in indicators {
            let range = self
                .table
                .get(name)
                .ok_or_else(|| ApiError::bad_request("invalid_payload", format!("unknown indicator {name}")))?;
            if range.source_category() != category {
                return Err(ApiError::bad_request(
                    "invalid_payload",
                    format!("indicator {name} comes from {}, not {category}", range.source_category()),
                ));
            }
            if !value.is_finite() {
                return Err(ApiError::bad_request("invalid_payload", format!("indicator {name} is not finite")));
            }
        }
        Ok(())
    }

    fn check_block(&self, category: ExamCategory, block: &[f64]) -> Result<(), ApiError> {
        if block.len() != self.block_width {
            return Err(ApiError::bad_request(
                "invalid_payload",
                format!("{category} block has width {}, expected {}", block.len(), self.block_width),
            ));
        }
        if block.iter().any(|v| !v.is_finite()) {
            return Err(ApiError::bad_request("invalid_payload", format!("{category} block has non-finite values")));
        }
        Ok(())
    }

    /// The block as submitted, or encoded from the indicator values.
    fn resolve_block(
        &self,
        category: ExamCategory,
        block: Option<Vec<f64>>,
        indicators: &BTreeMap<String, f64>,
    ) -> Result<Vec<f64>, ApiError> {
        self.check_indicators(category, indicators)?;
        let block = match block {
            Some(b) => b,
            None if indicators.is_empty() => {
                return Err(ApiError::bad_request(
                    "invalid_payload",
                    format!("{category} result needs a block or indicator values"),
                ))
            }
            None => encode_indicator_block(category, indicators, &self.table, self.block_width),
        };
        self.check_block(category, &block)?;
        Ok(block)
    }

    fn start(&self, request: StartRequest) -> Result<SessionView, ApiError> {
        let capability = match request.capability {
            Some(set) => InstitutionCapability::new(set)?,
            None => InstitutionCapability::full(),
        };
        let base_block = self.resolve_block(ExamCategory::Base, request.base_block, &request.indicators)?;
        let start = SessionStart {
            subject_id: request.subject_id,
            visit_index: request.visit_index,
            history: request.history,
            base_block,
            indicators: request.indicators,
            capability,
        };
        let id = format!("s{:06}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let (state, _) = self.engine.start_session(id.clone(), start)?;
        let view = SessionView::of(&state);
        self.sessions
            .write()
            .expect("session table lock")
            .insert(id.clone(), Arc::new(Mutex::new(state)));
        self.audit(serde_json::json!({"session_id": id, "event": "start", "action": view.action}));
        Ok(view)
    }

    fn apply(&self, id: &str, request: EventRequest) -> Result<SessionView, ApiError> {
        let event = match request {
            EventRequest::ExamResult {
                category,
                block,
                indicators,
            } => SessionEvent::ExamResult {
                category,
                block: self.resolve_block(category, block, &indicators)?,
                indicators,
            },
            EventRequest::ExamUnavailable { category } => SessionEvent::ExamUnavailable { category },
        };
        let session = self.session(id)?;
        let mut guard = session.lock().expect("session lock");
        let mut next = guard.clone();
        self.engine.step(&mut next, event.clone())?;
        *guard = next;
        let view = SessionView::of(&guard);
        drop(guard);
        self.audit(serde_json::json!({"session_id": id, "event": event, "action": view.action}));
        Ok(view)
    }

    fn view(&self, id: &str) -> Result<SessionView, ApiError> {
        let session = self.session(id)?;
        let guard = session.lock().expect("session lock");
        Ok(SessionView::of(&guard))
    }
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        let code = if e.is_syntax() || e.is_eof() { "malformed_json" } else { "invalid_payload" };
        ApiError::bad_request(code, e.to_string())
    })
}

/// Runs model work off the async workers.
async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> Result<T, ApiError> + Send + 'static,
) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f).await.map_err(|e| {
        ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", format!("request task failed: {e}"))
    })?
}

async fn create_session<M: DiagnosisModel + 'static>(
    State(state): State<Arc<ApiState<M>>>,
    body: Bytes,
) -> Result<(StatusCode, Json<SessionView>), ApiError> {
    let request: StartRequest = parse(&body)?;
    let view = blocking(move || state.start(request)).await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session<M: DiagnosisModel + 'static>(
    State(state): State<Arc<ApiState<M>>>,
    Path(id): Path<String>,
) -> Result<Json<SessionView>, ApiError> {
    state.view(&id).map(Json)
}

async fn post_event<M: DiagnosisModel + 'static>(
    State(state): State<Arc<ApiState<M>>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<SessionView>, ApiError> {
    // Unknown sessions are reported before payload problems.
    state.session(&id)?;
    let request: EventRequest = parse(&body)?;
    blocking(move || state.apply(&id, request)).await.map(Json)
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router<M: DiagnosisModel + 'static>(state: Arc<ApiState<M>>) -> Router {
    Router::new()
        .route("/v1/sessions", post(create_session::<M>))
        .route("/v1/sessions/{id}", get(get_session::<M>))
        .route("/v1/sessions/{id}/events", post(post_event::<M>))
        .fallback(fallback)
        .with_state(state)
}
