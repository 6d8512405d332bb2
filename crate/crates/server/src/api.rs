//! HTTP annotation API.
//!
//! One writer task owns the [`Session`] and drains a command queue; handlers
//! that mutate state send it a command and wait for the reply. `GET /state`
//! reads the view the writer publishes after every change.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use annoloop_core::annotation::{Reassignment, Verdict, VerdictSource};
use annoloop_core::dataset::EmbeddingDataset;
use annoloop_core::engine::persist::{
    append_ledger, persist_epoch, resume, save_boundary, write_outputs, RunDir,
};
use annoloop_core::engine::{EngineConfig, EngineError, PendingPair, Session, Step};
use annoloop_core::evaluation::EvalReport;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tokio::sync::{mpsc, oneshot, watch};

#[derive(Debug, Error)]
pub enum ApiError {
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("verdict must be 0 or 1")]
    InvalidVerdict,
    #[error("no session with id {0}")]
    SessionNotFound(String),
    #[error("pair {0} is stale")]
    StalePair(u64),
    #[error("pair {0} was never issued")]
    UnknownPair(u64),
    #[error("session writer has stopped")]
    Closed,
    #[error(transparent)]
    Engine(EngineError),
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::StalePair(id) => ApiError::StalePair(id),
            EngineError::UnknownPair(id) => ApiError::UnknownPair(id),
            other => ApiError::Engine(other),
        }
    }
}

impl ApiError {
    pub fn status(&self) -> StatusCode {
        match self {
            ApiError::Malformed(_) | ApiError::InvalidVerdict => StatusCode::BAD_REQUEST,
            ApiError::SessionNotFound(_) | ApiError::UnknownPair(_) => StatusCode::NOT_FOUND,
            ApiError::StalePair(_) => StatusCode::CONFLICT,
            ApiError::Closed => StatusCode::SERVICE_UNAVAILABLE,
            ApiError::Engine(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            ApiError::Malformed(_) => "MALFORMED_REQUEST",
            ApiError::InvalidVerdict => "INVALID_VERDICT",
            ApiError::SessionNotFound(_) => "SESSION_NOT_FOUND",
            ApiError::StalePair(_) => "STALE_PAIR",
            ApiError::UnknownPair(_) => "UNKNOWN_PAIR",
            ApiError::Closed => "SESSION_CLOSED",
            ApiError::Engine(_) => "ENGINE_ERROR",
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code(), "message": self.to_string() });
        (self.status(), Json(body)).into_response()
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SampleView {
    pub id: usize,
    pub image_ref: Option<String>,
    pub features: Vec<f64>,
    pub g: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum NextPair {
    Pair {
        pair_id: u64,
        a: SampleView,
        b: SampleView,
        stage: String,
        epoch: usize,
        budget_used: usize,
        budget_total: usize,
    },
    Phase {
        phase: String,
    },
}

#[derive(Debug, Clone, Serialize)]
pub struct VerdictAccepted {
    pub seq: u64,
    pub pair_id: u64,
    pub budget_used: usize,
    pub budget_total: usize,
    pub num_clusters: usize,
    pub reassignment: Value,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClusterSummary {
    pub cluster_id: usize,
    pub size: usize,
    pub representative: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StateView {
    pub session_id: String,
    pub phase: String,
    pub epoch: usize,
    pub epochs: usize,
    pub budget_used: usize,
    pub budget_total: usize,
    pub num_clusters: usize,
    pub num_noise: usize,
    pub stale_skipped: usize,
    pub clusters: Vec<ClusterSummary>,
    pub reports: Vec<EvalReport>,
}

impl StateView {
    fn of(id: &str, s: &Session) -> Self {
        let clusters = s.clusters();
        StateView {
            session_id: id.to_string(),
            phase: s.phase().to_string(),
            epoch: s.epoch(),
            epochs: s.config().epochs,
            budget_used: s.budget_used(),
            budget_total: s.budget_total(),
            num_clusters: clusters.len(),
            num_noise: clusters.noise_ids().len(),
            stale_skipped: s.stale_skipped(),
            clusters: clusters
                .clusters()
                .map(|c| ClusterSummary {
                    cluster_id: c.cluster_id,
                    size: c.len(),
                    representative: c.representative,
                })
                .collect(),
            reports: s.reports().to_vec(),
        }
    }
}

type Reply<T> = oneshot::Sender<Result<T, ApiError>>;

enum Command {
    NextPair(Reply<NextPair>),
    Verdict {
        pair_id: u64,
        v: Verdict,
        reply: Reply<VerdictAccepted>,
    },
}

#[derive(Clone)]
struct Handle {
    commands: mpsc::Sender<Command>,
    view: watch::Receiver<StateView>,
}

/// What `POST /session` needs to open (or reopen) the run.
pub struct ServeSetup {
    pub config: EngineConfig,
    pub dataset: Arc<EmbeddingDataset>,
    pub state_dir: PathBuf,
}

#[derive(Clone)]
pub struct AppState {
    setup: Arc<ServeSetup>,
    sessions: Arc<Mutex<HashMap<String, Handle>>>,
}

#[derive(Serialize, Deserialize)]
struct SessionFile {
    session_id: String,
}

impl AppState {
    /// Prepares the service. A run already present in the state directory
    /// is reopened under its recorded session id.
    pub fn new(setup: ServeSetup) -> Result<Self, ApiError> {
        let state = AppState {
            setup: Arc::new(setup),
            sessions: Arc::default(),
        };
        if let Some(id) = state.recorded_id() {
            state.open(id)?;
        }
        Ok(state)
    }

    fn session_file(&self) -> PathBuf {
        self.setup.state_dir.join("session.json")
    }

    fn recorded_id(&self) -> Option<String> {
        let bytes = std::fs::read(self.session_file()).ok()?;
        serde_json::from_slice::<SessionFile>(&bytes)
            .ok()
            .map(|f| f.session_id)
    }

    fn open(&self, id: String) -> Result<String, ApiError> {
        let dir = RunDir::create(&self.setup.state_dir)?;
        let config = self.setup.config.clone();
        let session = if dir.has_snapshot() {
            resume(&dir, config, &self.setup.dataset)?
        } else {
            Session::new(config, &self.setup.dataset)?
        };
        save_boundary(&dir, &session)?;
        write_outputs(&dir, &session)?;
        let file = serde_json::to_vec(&SessionFile {
            session_id: id.clone(),
        })
        .map_err(|e| ApiError::Engine(EngineError::Snapshot(e.to_string())))?;
        std::fs::write(self.session_file(), file)
            .map_err(|e| ApiError::Engine(EngineError::io(&self.session_file(), e)))?;

        let (tx, rx) = mpsc::channel(64);
        let (view_tx, view_rx) = watch::channel(StateView::of(&id, &session));
        let writer = Writer {
            id: id.clone(),
            session,
            dir,
            view: view_tx,
        };
        tokio::task::spawn_blocking(move || writer.run(rx));
        self.sessions.lock().unwrap().insert(
            id.clone(),
            Handle {
                commands: tx,
                view: view_rx,
            },
        );
        Ok(id)
    }

    fn handle(&self, id: &str) -> Result<Handle, ApiError> {
        self.sessions
            .lock()
            .unwrap()
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::SessionNotFound(id.to_string()))
    }
}

struct Writer {
    id: String,
    session: Session,
    dir: RunDir,
    view: watch::Sender<StateView>,
}

impl Writer {
    fn run(mut self, mut rx: mpsc::Receiver<Command>) {
        while let Some(cmd) = rx.blocking_recv() {
            match cmd {
                Command::NextPair(reply) => match self.session.next_pair() {
                    Ok(Step::Pair(p)) => {
                        let _ = reply.send(Ok(self.pair_view(&p)));
                    }
                    Ok(Step::Training) => {
                        let _ = reply.send(Ok(NextPair::Phase {
                            phase: "training".into(),
                        }));
                        if let Err(e) = self.train() {
                            log::error!("training failed, session {} stops: {e}", self.id);
                            return;
                        }
                    }
                    Ok(Step::Done) => {
                        let _ = reply.send(Ok(NextPair::Phase {
                            phase: "done".into(),
                        }));
                    }
                    Err(e) => {
                        let _ = reply.send(Err(e.into()));
                    }
                },
                Command::Verdict { pair_id, v, reply } => {
                    let _ = reply.send(self.verdict(pair_id, v));
                }
            }
            self.publish();
        }
    }

    fn publish(&self) {
        self.view
            .send_replace(StateView::of(&self.id, &self.session));
    }

    fn train(&mut self) -> Result<(), EngineError> {
        let report = self.session.advance()?;
        persist_epoch(&self.dir, &self.session, report.epoch)
    }

    fn verdict(&mut self, pair_id: u64, v: Verdict) -> Result<VerdictAccepted, ApiError> {
        let out = self
            .session
            .submit_verdict(pair_id, v, VerdictSource::Human)?;
        let record = self
            .session
            .ledger()
            .records()
            .nth(out.seq as usize)
            .expect("recorded verdict");
        append_ledger(&self.dir, &record)?;
        let reassignment = match out.reassignment {
            Reassignment::Unchanged => json!({ "kind": "unchanged" }),
            Reassignment::Split { kept, fresh } => {
                json!({ "kind": "split", "kept": kept, "fresh": fresh })
            }
            Reassignment::Merged { into, absorbed } => {
                json!({ "kind": "merged", "into": into, "absorbed": absorbed })
            }
        };
        Ok(VerdictAccepted {
            seq: out.seq,
            pair_id,
            budget_used: self.session.budget_used(),
            budget_total: self.session.budget_total(),
            num_clusters: self.session.clusters().len(),
            reassignment,
        })
    }

    fn pair_view(&self, p: &PendingPair) -> NextPair {
        let ds = self.session.dataset();
        let sample = |id: usize| {
            let s = &ds.samples()[id];
            SampleView {
                id,
                image_ref: s.image_ref.clone(),
                features: s.base_feature.clone(),
                g: s.g_descriptor.clone(),
            }
        };
        NextPair::Pair {
            pair_id: p.pair_id,
            a: sample(p.pair.a),
            b: sample(p.pair.b),
            stage: p.pair.stage.to_string(),
            epoch: p.epoch,
            budget_used: self.session.budget_used(),
            budget_total: self.session.budget_total(),
        }
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/session", post(create_session))
        .route("/session/{id}/next-pair", get(next_pair))
        .route("/session/{id}/verdict", post(submit_verdict))
        .route("/session/{id}/state", get(session_state))
        .with_state(state)
}

async fn healthz() -> Json<Value> {
    Json(json!({ "status": "ok" }))
}

/// Opens the run, or returns the id of the one already open.
async fn create_session(State(state): State<AppState>) -> Result<Json<Value>, ApiError> {
    let existing = state.sessions.lock().unwrap().keys().next().cloned();
    let id = match existing {
        Some(id) => id,
        None => {
            let id = format!("{:016x}", rand::random::<u64>());
            let st = state.clone();
            tokio::task::spawn_blocking(move || st.open(id))
                .await
                .map_err(|_| ApiError::Closed)??
        }
    };
    Ok(Json(json!({ "session_id": id })))
}

async fn next_pair(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<NextPair>, ApiError> {
    let handle = state.handle(&id)?;
    let (tx, rx) = oneshot::channel();
    handle
        .commands
        .send(Command::NextPair(tx))
        .await
        .map_err(|_| ApiError::Closed)?;
    Ok(Json(rx.await.map_err(|_| ApiError::Closed)??))
}

async fn submit_verdict(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Result<Json<Value>, JsonRejection>,
) -> Result<Json<VerdictAccepted>, ApiError> {
    let handle = state.handle(&id)?;
    let Json(body) = body.map_err(|e| ApiError::Malformed(e.body_text()))?;
    let pair_id = body
        .get("pair_id")
        .and_then(Value::as_u64)
        .ok_or_else(|| ApiError::Malformed("pair_id must be a non-negative integer".into()))?;
    let v = match body.get("v") {
        None => return Err(ApiError::Malformed("missing field v".into())),
        Some(v) => v
            .as_i64()
            .and_then(|v| Verdict::try_from(v).ok())
            .ok_or(ApiError::InvalidVerdict)?,
    };
    let (tx, rx) = oneshot::channel();
    handle
        .commands
        .send(Command::Verdict {
            pair_id,
            v,
            reply: tx,
        })
        .await
        .map_err(|_| ApiError::Closed)?;
    Ok(Json(rx.await.map_err(|_| ApiError::Closed)??))
}

async fn session_state(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> Result<Json<StateView>, ApiError> {
    let handle = state.handle(&id)?;
    let view = handle.view.borrow().clone();
    Ok(Json(view))
}
