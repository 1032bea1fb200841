//! HTTP service for live sessions where a person executes the human steps.
//!
//! | method | path | body | reply |
//! |---|---|---|---|
//! | POST | `/sessions` | [`CreateSession`] | [`SessionView`] |
//! | GET | `/sessions/{id}` | | [`SessionView`] |
//! | POST | `/sessions/{id}/action` | [`SubmitAction`] | [`SessionView`] |
//! | GET | `/pending` | | `[`[`PendingSummary`]`]` |
//!
//! Errors are `{"error": "..."}` with status 404 (unknown session or
//! query), 409 (session not awaiting that turn), 422 (unparseable action,
//! the turn stays open) or 400 (bad request).

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread;
use std::time::{Duration, Instant};

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};

use crate::actors::live::BusError;
use crate::actors::{parse_submission, Actor, ActorError, ActorPair, LiveHumanActor, PendingTurn, SessionBus, SubmitOutcome};
use crate::choice::{Bernoulli, ChoiceSource, Constant, PolicySource};
use crate::collector::{choice_rng, record_line, rollout_with, CollectError, DatasetAppender, Provenance};
use crate::envs::{EnvError, Environment};
use crate::policy::PolicyParams;
use crate::trajectory::{CollabChoice, CollabState, Step, TaskQuery, Trajectory};

pub type EnvFactory = Arc<dyn Fn() -> Result<Box<dyn Environment>, EnvError> + Send + Sync>;
pub type ActorFactory = Arc<dyn Fn() -> Result<Box<dyn Actor>, ActorError> + Send + Sync>;

/// How long a request waits for the episode loop to reach the next human
/// turn or finish before replying with the current view.
const SETTLE_WAIT: Duration = Duration::from_secs(30);

pub struct ServiceConfig {
    pub queries: Vec<Arc<TaskQuery>>,
    pub env: EnvFactory,
    pub agent: ActorFactory,
    /// Shows the agent's proposed action to the human as a reference.
    pub hint: bool,
    pub turn_timeout: Duration,
    pub default_lambda: f64,
    /// Trained params for sessions created with `{"kind": "policy"}`.
    pub policy: Option<PolicyParams>,
    pub dataset_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    AwaitingHuman,
    Finished,
    Aborted,
}

/// Who decides the allocation in a session.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SourceSpec {
    AgentOnly,
    HumanOnly,
    Random { p_human: f64 },
    /// The service's loaded policy, greedily.
    Policy,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CreateSession {
    pub query_id: String,
    pub source: SourceSpec,
    #[serde(default)]
    pub lambda: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SubmitAction {
    /// Defaults to the open turn.
    #[serde(default)]
    pub turn_index: Option<usize>,
    pub text: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PendingView {
    pub turn_index: usize,
    pub rendering: String,
    pub legal_actions: Vec<String>,
    pub hint: Option<String>,
    pub error: Option<String>,
}

impl From<PendingTurn> for PendingView {
    fn from(t: PendingTurn) -> Self {
        PendingView {
            turn_index: t.turn_index,
            rendering: t.rendering,
            legal_actions: t.legal_actions,
            hint: t.hint,
            error: t.error,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub query_id: String,
    pub question: String,
    pub status: SessionStatus,
    pub lambda: f64,
    pub history: Vec<Step>,
    pub pending_turn: Option<PendingView>,
    pub task_reward: Option<f64>,
    pub interventions: Option<usize>,
    pub reward: Option<f64>,
    /// Dataset line of the finished trajectory.
    pub record: Option<String>,
    pub error: Option<String>,
    /// Set when the submission repeated an already-answered turn.
    #[serde(default)]
    pub duplicate: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PendingSummary {
    pub session_id: String,
    pub query_id: String,
    pub turn_index: usize,
    pub age_ms: u64,
}

struct SessionRecord {
    query: Arc<TaskQuery>,
    lambda: f64,
    ended: Option<SessionStatus>,
    history: Vec<Step>,
    trajectory: Option<Trajectory>,
    error: Option<String>,
}

pub struct Service {
    cfg: ServiceConfig,
    bus: Arc<SessionBus>,
    sessions: Mutex<BTreeMap<String, SessionRecord>>,
    next_id: AtomicU64,
    appender: Mutex<Option<DatasetAppender>>,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            message: message.into(),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(serde_json::json!({ "error": self.message }))).into_response()
    }
}

impl Service {
    pub fn new(cfg: ServiceConfig) -> Arc<Self> {
        Arc::new(Service {
            cfg,
            bus: SessionBus::new(),
            sessions: Mutex::new(BTreeMap::new()),
            next_id: AtomicU64::new(1),
            appender: Mutex::new(None),
        })
    }

    fn sessions(&self) -> MutexGuard<'_, BTreeMap<String, SessionRecord>> {
        self.sessions.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn ended(&self, id: &str) -> bool {
        self.sessions().get(id).is_none_or(|r| r.ended.is_some())
    }

    /// Starts the episode loop on its own thread.
    pub fn create(self: &Arc<Self>, req: CreateSession) -> Result<String, ApiError> {
        let query = self
            .cfg
            .queries
            .iter()
            .find(|q| q.id == req.query_id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown query {}", req.query_id)))?;
        let lambda = req.lambda.unwrap_or(self.cfg.default_lambda);
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("lambda {lambda} must be >= 0")));
        }
        let mut source: Box<dyn ChoiceSource> = match req.source {
            SourceSpec::AgentOnly => Box::new(Constant(CollabChoice::Agent)),
            SourceSpec::HumanOnly => Box::new(Constant(CollabChoice::Human)),
            SourceSpec::Random { p_human } if (0.0..=1.0).contains(&p_human) => Box::new(Bernoulli { p_human }),
            SourceSpec::Random { p_human } => {
                return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("p_human {p_human} outside [0,1]")))
            }
            SourceSpec::Policy => Box::new(PolicySource::greedy(self.cfg.policy.clone().ok_or_else(|| {
                ApiError::new(StatusCode::BAD_REQUEST, "no policy loaded")
            })?)),
        };
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        self.sessions().insert(
            id.clone(),
            SessionRecord {
                query: Arc::clone(&query),
                lambda,
                ended: None,
                history: Vec::new(),
                trajectory: None,
                error: None,
            },
        );
        let svc = Arc::clone(self);
        let sid = id.clone();
        thread::spawn(move || {
            let result = svc.run(&sid, &query, source.as_mut(), lambda, req.seed);
            svc.finish(&sid, result);
        });
        Ok(id)
    }

    fn run(
        &self,
        id: &str,
        query: &Arc<TaskQuery>,
        source: &mut dyn ChoiceSource,
        lambda: f64,
        seed: u64,
    ) -> Result<Trajectory, CollectError> {
        let actor_err = |source| CollectError::Actor { step: 0, source };
        let mut env = (self.cfg.env)()?;
        let mut human = LiveHumanActor::new("annotator", id, Arc::clone(&self.bus)).with_timeout(self.cfg.turn_timeout);
        if self.cfg.hint {
            human = human.with_hint_source((self.cfg.agent)().map_err(actor_err)?);
        }
        let mut actors = ActorPair::new((self.cfg.agent)().map_err(actor_err)?, Box::new(human));
        env.reseed(seed);
        let mut rng = choice_rng(seed);
        let start = env.reset(query)?;
        let mut observe = |s: &CollabState| {
            if let Some(r) = self.sessions().get_mut(id) {
                r.history = s.history.clone();
            }
        };
        rollout_with(env.as_mut(), &mut actors, source, start, None, &mut rng, lambda, Some(&mut observe))
    }

    fn finish(&self, id: &str, result: Result<Trajectory, CollectError>) {
        let mut append_error = None;
        if let (Ok(t), Some(path)) = (&result, &self.cfg.dataset_out) {
            let mut guard = self.appender.lock().unwrap_or_else(|p| p.into_inner());
            let opened = match guard.as_mut() {
                Some(a) => Ok(a),
                None => DatasetAppender::open(path, &self.cfg.queries, Provenance::RealHuman, self.cfg.default_lambda)
                    .map(|a| guard.insert(a)),
            };
            if let Err(e) = opened.and_then(|a| a.append(t)) {
                append_error = Some(e.to_string());
            }
        }
        if let Some(r) = self.sessions().get_mut(id) {
            match result {
                Ok(t) => {
                    r.history = t.steps.clone();
                    r.trajectory = Some(t);
                    r.ended = Some(SessionStatus::Finished);
                    r.error = append_error;
                }
                Err(e) => {
                    r.ended = Some(SessionStatus::Aborted);
                    r.error = Some(match e {
                        CollectError::Actor {
                            source: ActorError::Timeout(d),
                            ..
                        } => format!("human turn timed out after {}s", d.as_secs_f64()),
                        other => other.to_string(),
                    });
                }
            }
        }
        self.bus.close(id);
        self.bus.notify();
    }

    pub fn view(&self, id: &str) -> Result<SessionView, ApiError> {
        let pending = self.bus.pending(id);
        let sessions = self.sessions();
        let r = sessions
            .get(id)
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, format!("unknown session {id}")))?;
        let status = r.ended.unwrap_or(if pending.is_some() {
            SessionStatus::AwaitingHuman
        } else {
            SessionStatus::Running
        });
        let t = r.trajectory.as_ref();
        Ok(SessionView {
            session_id: id.to_string(),
            query_id: r.query.id.clone(),
            question: r.query.text.clone(),
            status,
            lambda: r.lambda,
            history: r.history.clone(),
            pending_turn: pending.filter(|_| r.ended.is_none()).map(PendingView::from),
            task_reward: t.map(|t| t.task_reward),
            interventions: t.map(|t| t.intervention_count),
            reward: t.map(|t| t.reward),
            record: t.map(record_line),
            error: r.error.clone(),
            duplicate: false,
        })
    }

    /// Blocks until the session awaits a turn after `after`, or has ended.
    pub fn settle(&self, id: &str, after: usize, timeout: Duration) {
        self.bus
            .wait_until(id, timeout, |p| p.is_some_and(|t| t.turn_index > after) || self.ended(id));
    }

    pub fn submit(&self, id: &str, req: &SubmitAction) -> Result<SessionView, ApiError> {
        let view = self.view(id)?;
        let conflict = |m: String| ApiError::new(StatusCode::CONFLICT, m);
        let Some(pending) = self.bus.pending(id).filter(|_| view.status == SessionStatus::AwaitingHuman) else {
            if let Some(turn) = req.turn_index.filter(|&t| t <= view.history.len()) {
                if view.history.get(turn - 1).is_some_and(|s| s.collab == CollabChoice::Human) {
                    return Ok(SessionView { duplicate: true, ..view });
                }
            }
            return Err(conflict(format!("session {id} is not awaiting a human action")));
        };
        let turn = req.turn_index.unwrap_or(pending.turn_index);
        if let Err(e) = parse_submission(&req.text, pending.dataset_tag) {
            if turn == pending.turn_index {
                self.bus.reject(id, e.clone());
            }
            return Err(ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e));
        }
        match self.bus.submit(id, turn, &req.text) {
            Ok(SubmitOutcome::Accepted) => {
                self.settle(id, turn, SETTLE_WAIT);
                self.view(id)
            }
            Ok(SubmitOutcome::Duplicate) => Ok(SessionView {
                duplicate: true,
                ..self.view(id)?
            }),
            Err(e @ (BusError::NotAwaiting(_) | BusError::WrongTurn { .. })) => Err(conflict(e.to_string())),
        }
    }

    pub fn pending(&self) -> Vec<PendingSummary> {
        let now = Instant::now();
        let sessions = self.sessions();
        self.bus
            .list_pending()
            .into_iter()
            .filter_map(|t| {
                let r = sessions.get(&t.session_id).filter(|r| r.ended.is_none())?;
                Some(PendingSummary {
                    query_id: r.query.id.clone(),
                    turn_index: t.turn_index,
                    age_ms: now.saturating_duration_since(t.opened_at).as_millis() as u64,
                    session_id: t.session_id,
                })
            })
            .collect()
    }
}

async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?
}

async fn create_session(
    State(svc): State<Arc<Service>>,
    Json(req): Json<CreateSession>,
) -> Result<Json<SessionView>, ApiError> {
    blocking(move || {
        let id = svc.create(req)?;
        svc.settle(&id, 0, SETTLE_WAIT);
        svc.view(&id)
    })
    .await
    .map(Json)
}

async fn get_session(State(svc): State<Arc<Service>>, Path(id): Path<String>) -> Result<Json<SessionView>, ApiError> {
    svc.view(&id).map(Json)
}

async fn submit_action(
    State(svc): State<Arc<Service>>,
    Path(id): Path<String>,
    Json(req): Json<SubmitAction>,
) -> Result<Json<SessionView>, ApiError> {
    blocking(move || svc.submit(&id, &req)).await.map(Json)
}

async fn list_pending(State(svc): State<Arc<Service>>) -> Json<Vec<PendingSummary>> {
    Json(svc.pending())
}

pub fn router(svc: Arc<Service>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/action", post(submit_action))
        .route("/pending", get(list_pending))
        .with_state(svc)
}

/// Serves until the process is stopped.
pub async fn serve(svc: Arc<Service>, addr: std::net::SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(svc)).await
}
