//! HTTP API for interactive use. A query runs in two phases: `POST
//! /api/query` starts reasoning and retrieval and returns a query token;
//! `POST /api/query/{token}/select` picks the reference and starts
//! completion, returning a selection token to poll.
//!
//! Every query is journaled under `runs/<service_run>` with the same
//! records a CLI run writes, and the requests that started it go to
//! `requests.jsonl` beside the journal. Tokens unknown to a restarted
//! service are recovered from those two files.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use albumfill_core::compose::visible_region_png;
use albumfill_core::engine::{
    append_journal, read_journal, run_dir, BatchConfig, Engine, EngineError, JournalRecord,
    PipelineRun, QueryOutcome, Retrieval, RunOptions, RunStatus, SelectionMode, Stage, Trace,
    JOURNAL_FILE,
};
use albumfill_core::imageio;
use albumfill_core::index::{Candidate, RankedCandidates};
use albumfill_core::mask::Mask;
use albumfill_core::pipeline::file_safe;
use albumfill_core::seed::derive_seed;
use axum::extract::rejection::JsonRejection;
use axum::extract::{Path as UrlPath, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use log::{error, info, warn};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::task::JoinSet;

use crate::app::{check_run_id, model_ids, open_engine, persist_outcome};
use crate::commands::{ensure_run_config, QueryOptions};
use crate::config::{AuthMode, ServiceConfig};
use crate::error::CliError;
use crate::reports;

pub const REQUESTS_FILE: &str = "requests.jsonl";
const SELECTION_SUFFIX: &str = ".sel";

// ---------------------------------------------------------------------------
// errors

#[derive(Debug, Clone)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: String,
    pub message: String,
    pub stage: Option<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            code: code.into(),
            message: message.into(),
            stage: None,
        }
    }

    fn body(&self) -> Value {
        json!({"code": self.code, "message": self.message, "stage": self.stage})
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({"error": self.body()}))).into_response()
    }
}

impl From<&EngineError> for ApiError {
    fn from(e: &EngineError) -> Self {
        let code = e.code();
        let status = match e {
            _ if code == "timeout" => StatusCode::GATEWAY_TIMEOUT,
            EngineError::Provider { .. } => StatusCode::BAD_GATEWAY,
            EngineError::UnknownAlbum(_)
            | EngineError::UnknownImage(_)
            | EngineError::NotInAlbum { .. } => StatusCode::NOT_FOUND,
            EngineError::Io { .. }
            | EngineError::Journal { .. }
            | EngineError::Image(_)
            | EngineError::Index(_)
            | EngineError::MissingEmbedding(_)
            | EngineError::ConfigMismatch { .. } => StatusCode::INTERNAL_SERVER_ERROR,
            _ => StatusCode::BAD_REQUEST,
        };
        Self {
            status,
            code: code.into(),
            message: e.to_string(),
            stage: e.stage().map(|s| s.to_string()),
        }
    }
}

impl From<EngineError> for ApiError {
    fn from(e: EngineError) -> Self {
        (&e).into()
    }
}

impl From<CliError> for ApiError {
    fn from(e: CliError) -> Self {
        let status = match e.code.as_str() {
            "io" | "journal" | "image" => StatusCode::INTERNAL_SERVER_ERROR,
            "not_found" | "no_report" => StatusCode::NOT_FOUND,
            _ => StatusCode::BAD_REQUEST,
        };
        Self {
            status,
            code: e.code,
            message: e.message,
            stage: e.stage,
        }
    }
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
}

// ---------------------------------------------------------------------------
// state

enum QueryPhase {
    Pending,
    Ready(Box<Retrieval>, Trace),
    Failed(ApiError),
}

enum CompletionPhase {
    Pending,
    Done(Box<PipelineRun>),
    Failed(ApiError),
}

struct Session {
    query: QueryPhase,
    completion: Option<CompletionPhase>,
}

pub struct AppState {
    engine: Arc<Engine>,
    config: ServiceConfig,
    dir: PathBuf,
    /// Journal appends are single writes; the lock keeps each query's
    /// records from interleaving with another's.
    journal: tokio::sync::Mutex<()>,
    sessions: Mutex<HashMap<String, Session>>,
    tasks: Mutex<JoinSet<()>>,
    epoch: u64,
    counter: AtomicU64,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
enum RequestRecord {
    Query {
        query_id: String,
        album_id: String,
        target_image_id: String,
        options: RunOptions,
        mask_ref: String,
    },
    Select {
        query_id: String,
        image_id: String,
    },
}

impl AppState {
    pub fn new(config: ServiceConfig) -> Result<Arc<Self>, CliError> {
        let engine = open_engine(&config)?;
        Self::with_engine(Arc::new(engine), config)
    }

    pub fn with_engine(engine: Arc<Engine>, config: ServiceConfig) -> Result<Arc<Self>, CliError> {
        let dir = run_dir(&config.runs, &config.service_run);
        let mut batch = BatchConfig::new(config.service_run.clone(), RunOptions::default());
        batch.models = model_ids(engine.gateway());
        ensure_run_config(&dir, &batch)?;
        let epoch = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_nanos() as u64);
        Ok(Arc::new(Self {
            engine,
            config,
            dir,
            journal: tokio::sync::Mutex::new(()),
            sessions: Mutex::new(HashMap::new()),
            tasks: Mutex::new(JoinSet::new()),
            epoch,
            counter: AtomicU64::new(0),
        }))
    }

    pub fn run_dir(&self) -> &Path {
        &self.dir
    }

    fn new_token(&self) -> String {
        let n = self.counter.fetch_add(1, Ordering::SeqCst);
        format!(
            "q{:016x}",
            derive_seed(&[b"query-token", &self.epoch.to_le_bytes(), &n.to_le_bytes()])
        )
    }

    fn spawn(&self, task: impl std::future::Future<Output = ()> + Send + 'static) {
        let mut tasks = self.tasks.lock().unwrap();
        while tasks.try_join_next().is_some() {}
        tasks.spawn(task);
    }

    async fn journal(&self, records: &[JournalRecord]) {
        let _guard = self.journal.lock().await;
        if let Err(e) = append_journal(&self.dir.join(JOURNAL_FILE), records) {
            error!("journal write failed: {e}");
        }
    }

    async fn log_request(&self, record: &RequestRecord) -> Result<(), ApiError> {
        let _guard = self.journal.lock().await;
        let path = self.dir.join(REQUESTS_FILE);
        let line = serde_json::to_string(record).expect("request serialises") + "\n";
        use std::io::Write;
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .and_then(|mut f| f.write_all(line.as_bytes()))
            .map_err(internal)
    }

    async fn persist(&self, outcome: &QueryOutcome) {
        let _guard = self.journal.lock().await;
        if let Err(e) = persist_outcome(&self.dir, outcome) {
            error!("{}: could not persist outcome: {e}", outcome.run.query_id);
        }
    }

    /// Waits for queued work, up to `grace`, then cancels what is left.
    pub async fn drain(&self, grace: Duration) {
        let mut tasks = std::mem::take(&mut *self.tasks.lock().unwrap());
        if tasks.is_empty() {
            return;
        }
        info!(
            "waiting up to {grace:?} for {} in-flight request(s)",
            tasks.len()
        );
        let all = async { while tasks.join_next().await.is_some() {} };
        if tokio::time::timeout(grace, all).await.is_err() {
            warn!("cancelling {} request(s) still running", tasks.len());
            tasks.abort_all();
            while tasks.join_next().await.is_some() {}
        }
    }

    fn known(&self, token: &str) -> bool {
        self.sessions.lock().unwrap().contains_key(token)
    }

    /// Rebuilds a session from the run directory after a restart.
    fn recover(&self, token: &str) -> bool {
        if self.known(token) {
            return true;
        }
        match self.load_session(token) {
            Ok(Some(session)) => {
                self.sessions
                    .lock()
                    .unwrap()
                    .entry(token.to_string())
                    .or_insert(session);
                true
            }
            Ok(None) => false,
            Err(e) => {
                warn!("could not recover {token}: {}", e.message);
                false
            }
        }
    }

    fn load_session(&self, token: &str) -> Result<Option<Session>, ApiError> {
        let records: Vec<JournalRecord> = read_journal(&self.dir.join(JOURNAL_FILE))?
            .into_iter()
            .filter(|r| r.query_id == token)
            .collect();
        if let Some(run) = records.iter().find_map(JournalRecord::as_run) {
            let completion = match &run.status {
                RunStatus::Failed { .. } => None,
                RunStatus::Ok => Some(CompletionPhase::Done(Box::new(run.clone()))),
                RunStatus::CompletionFailed { code, error } => {
                    Some(CompletionPhase::Failed(ApiError {
                        status: if code == "timeout" {
                            StatusCode::GATEWAY_TIMEOUT
                        } else {
                            StatusCode::BAD_GATEWAY
                        },
                        code: code.clone(),
                        message: error.clone(),
                        stage: Some(Stage::Complete.to_string()),
                    }))
                }
            };
            let query = match &run.status {
                RunStatus::Failed { stage, code, error } => QueryPhase::Failed(ApiError {
                    status: if code == "timeout" {
                        StatusCode::GATEWAY_TIMEOUT
                    } else {
                        StatusCode::BAD_GATEWAY
                    },
                    code: code.clone(),
                    message: error.clone(),
                    stage: Some(stage.to_string()),
                }),
                _ => {
                    let retrieval =
                        self.rebuild(token, &run.candidates, run.reasoning_text.clone())?;
                    QueryPhase::Ready(Box::new(retrieval), Trace::default())
                }
            };
            return Ok(Some(Session { query, completion }));
        }
        let Some(retrieve) = records.iter().find(|r| r.stage == Stage::Retrieve.as_str()) else {
            return Ok(None);
        };
        let candidates: Vec<Candidate> =
            serde_json::from_value(retrieve.data["candidates"].clone()).map_err(internal)?;
        let reasoning = records
            .iter()
            .find(|r| r.stage == Stage::Reason.as_str())
            .and_then(|r| r.data["text"].as_str().map(String::from));
        let retrieval = self.rebuild(token, &candidates, reasoning)?;
        Ok(Some(Session {
            query: QueryPhase::Ready(Box::new(retrieval), Trace::default()),
            completion: None,
        }))
    }

    fn rebuild(
        &self,
        token: &str,
        candidates: &[Candidate],
        reasoning: Option<String>,
    ) -> Result<Retrieval, ApiError> {
        let text = std::fs::read_to_string(self.dir.join(REQUESTS_FILE)).map_err(internal)?;
        let request = text
            .lines()
            .filter_map(|l| serde_json::from_str::<RequestRecord>(l).ok())
            .find_map(|r| match r {
                RequestRecord::Query {
                    query_id,
                    album_id,
                    target_image_id,
                    options,
                    mask_ref,
                } if query_id == token => Some((album_id, target_image_id, options, mask_ref)),
                _ => None,
            })
            .ok_or_else(|| internal(format!("no request recorded for {token}")))?;
        let (album, target, options, mask_ref) = request;
        let mask = Mask::load(&self.dir.join(mask_ref)).map_err(internal)?;
        let input = self.engine.adhoc_input(token, &album, &target, mask)?;
        let visible_png = visible_region_png(&self.engine.image_bytes(&target)?, &input.mask)
            .map_err(internal)?;
        Ok(Retrieval {
            input,
            options,
            visible_png,
            reasoning_text: reasoning,
            candidates: RankedCandidates {
                query_id: token.to_string(),
                items: candidates.to_vec(),
            },
        })
    }
}

// ---------------------------------------------------------------------------
// routes

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/albums", get(list_albums))
        .route("/api/albums/{id}/images", get(album_images))
        .route("/api/query", post(start_query))
        .route("/api/query/{token}", get(query_status))
        .route("/api/query/{token}/select", post(select))
        .route("/api/completion/{token}", get(completion_status))
        .route("/api/runs/{run_id}/report", get(run_report))
        .layer(middleware::from_fn_with_state(state.clone(), authorize))
        .with_state(state)
}

async fn authorize(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if state.config.auth.mode == AuthMode::Bearer {
        let expected = state
            .config
            .auth
            .token
            .as_deref()
            .map(|t| format!("Bearer {t}"));
        let given = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok());
        if expected.is_none() || given != expected.as_deref() {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or wrong bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

#[derive(Serialize)]
struct AlbumSummary<'a> {
    album_id: &'a str,
    dominant_identity: &'a str,
    image_count: usize,
    cover_image_id: Option<&'a str>,
}

async fn list_albums(State(state): State<Arc<AppState>>) -> Response {
    let albums: Vec<AlbumSummary> = state
        .engine
        .manifest()
        .albums()
        .iter()
        .map(|a| AlbumSummary {
            album_id: &a.album_id,
            dominant_identity: &a.dominant_identity,
            image_count: a.image_ids.len(),
            cover_image_id: a.image_ids.first().map(String::as_str),
        })
        .collect();
    Json(albums).into_response()
}

async fn album_images(
    State(state): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
) -> Result<Response, ApiError> {
    let engine = &state.engine;
    let album = engine
        .manifest()
        .album(&id)
        .ok_or_else(|| ApiError::from(EngineError::UnknownAlbum(id.clone())))?;
    let mut out = Vec::new();
    for image_id in &album.image_ids {
        let record = engine
            .manifest()
            .image(image_id)
            .expect("album images are in the manifest");
        out.push(json!({
            "image_id": image_id,
            "width": record.width,
            "height": record.height,
            "image_b64": B64.encode(engine.image_bytes(image_id)?),
        }));
    }
    Ok(Json(out).into_response())
}

#[derive(Debug, Deserialize)]
struct QueryRequest {
    album_id: String,
    target_image_id: String,
    mask_b64: String,
    #[serde(default)]
    compose_mode: Option<String>,
    #[serde(default)]
    alpha: Option<f64>,
    #[serde(default)]
    k: Option<usize>,
    /// Caller-chosen query id; a fresh token otherwise.
    #[serde(default)]
    query_id: Option<String>,
}

fn json_body<T>(body: Result<Json<T>, JsonRejection>) -> Result<T, ApiError> {
    body.map(|Json(v)| v)
        .map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_json", e.body_text()))
}

fn mask_error(message: impl Into<String>) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, "mask_shape", message)
}

async fn start_query(
    State(state): State<Arc<AppState>>,
    body: Result<Json<QueryRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let req = json_body(body)?;
    let bytes = B64
        .decode(req.mask_b64.trim())
        .map_err(|e| mask_error(format!("mask_b64 is not base64: {e}")))?;
    let mask = Mask::from_png(&bytes).map_err(|e| mask_error(e.to_string()))?;
    let options = QueryOptions {
        k: req.k,
        compose_mode: req.compose_mode.clone(),
        alpha: req.alpha,
        selection: SelectionMode::AutoTop1,
        seed: None,
    }
    .resolve(&state.config)?;

    let token = match req.query_id {
        Some(id) => {
            if id.is_empty() || file_safe(&id) != id || id.ends_with(SELECTION_SUFFIX) {
                return Err(ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "invalid_input",
                    "query_id must be a plain name",
                ));
            }
            if state.recover(&id) {
                return Err(ApiError::new(
                    StatusCode::CONFLICT,
                    "duplicate_query",
                    format!("query {id} exists"),
                ));
            }
            id
        }
        None => state.new_token(),
    };
    let input =
        state
            .engine
            .adhoc_input(token.clone(), &req.album_id, &req.target_image_id, mask)?;

    let mask_ref = format!("masks/{}.png", file_safe(&token));
    let mask_path = state.dir.join(&mask_ref);
    std::fs::create_dir_all(mask_path.parent().unwrap()).map_err(internal)?;
    input.mask.save(&mask_path).map_err(internal)?;
    state
        .log_request(&RequestRecord::Query {
            query_id: token.clone(),
            album_id: req.album_id,
            target_image_id: req.target_image_id,
            options: options.clone(),
            mask_ref,
        })
        .await?;
    {
        let mut sessions = state.sessions.lock().unwrap();
        if sessions.contains_key(&token) {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "duplicate_query",
                format!("query {token} exists"),
            ));
        }
        sessions.insert(
            token.clone(),
            Session {
                query: QueryPhase::Pending,
                completion: None,
            },
        );
    }

    let task_state = state.clone();
    let task_token = token.clone();
    state.spawn(async move {
        let state = task_state;
        let mut trace = Trace::default();
        let deadline = state.config.request_timeout();
        let result = tokio::time::timeout(
            deadline,
            state.engine.retrieve(input.clone(), &options, &mut trace),
        )
        .await;
        let result = result.unwrap_or_else(|_| {
            Err(EngineError::Deadline {
                stage: trace.pending_stage(options.policy),
            })
        });
        let phase = match result {
            Ok(retrieval) => {
                state.journal(&trace.records).await;
                let timings = Trace {
                    records: Vec::new(),
                    timings_ms: trace.timings_ms,
                };
                QueryPhase::Ready(Box::new(retrieval), timings)
            }
            Err(e) => {
                warn!("query {task_token}: {e}");
                let outcome = state.engine.retrieval_failed(&input, &options, &e, trace);
                state.journal(&outcome.records).await;
                QueryPhase::Failed(ApiError::from(&e))
            }
        };
        if let Some(s) = state.sessions.lock().unwrap().get_mut(&task_token) {
            s.query = phase;
        };
    });
    Ok((StatusCode::ACCEPTED, Json(json!({"query_token": token}))).into_response())
}

fn unknown(token: &str) -> ApiError {
    ApiError::new(
        StatusCode::NOT_FOUND,
        "unknown_token",
        format!("no query {token}"),
    )
}

fn failed(e: &ApiError) -> Response {
    (
        e.status,
        Json(json!({"status": "failed", "error": e.body()})),
    )
        .into_response()
}

async fn query_status(
    State(state): State<Arc<AppState>>,
    UrlPath(token): UrlPath<String>,
) -> Result<Response, ApiError> {
    if !state.recover(&token) {
        return Err(unknown(&token));
    }
    let sessions = state.sessions.lock().unwrap();
    let session = sessions.get(&token).ok_or_else(|| unknown(&token))?;
    Ok(match &session.query {
        QueryPhase::Pending => {
            Json(json!({"status": "pending", "query_id": token})).into_response()
        }
        QueryPhase::Failed(e) => failed(e),
        QueryPhase::Ready(r, _) => Json(json!({
            "status": "ready",
            "query_id": token,
            "reasoning_text": r.reasoning_text,
            "candidates": r.candidates.items,
            "selected": session.completion.is_some(),
        }))
        .into_response(),
    })
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SelectRequest {
    Choice { image_id: String },
    Bare(String),
}

async fn select(
    State(state): State<Arc<AppState>>,
    UrlPath(token): UrlPath<String>,
    body: Result<Json<SelectRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let choice = match json_body(body)? {
        SelectRequest::Choice { image_id } | SelectRequest::Bare(image_id) => image_id,
    };
    if !state.recover(&token) {
        return Err(unknown(&token));
    }
    let manual = (choice != "auto").then_some(choice.clone());
    let (retrieval, timings) = {
        let mut sessions = state.sessions.lock().unwrap();
        let session = sessions.get_mut(&token).ok_or_else(|| unknown(&token))?;
        let QueryPhase::Ready(retrieval, timings) = &session.query else {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "not_ready",
                "the query has no candidates yet",
            ));
        };
        if session.completion.is_some() {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "already_selected",
                "a reference was already chosen",
            ));
        }
        let mut retrieval = (**retrieval).clone();
        retrieval.options.selection = if manual.is_some() {
            SelectionMode::Manual
        } else {
            SelectionMode::AutoTop1
        };
        state.engine.select(&retrieval, manual.as_deref())?;
        session.completion = Some(CompletionPhase::Pending);
        (retrieval, timings.clone())
    };
    if let Err(e) = state
        .log_request(&RequestRecord::Select {
            query_id: token.clone(),
            image_id: choice,
        })
        .await
    {
        if let Some(s) = state.sessions.lock().unwrap().get_mut(&token) {
            s.completion = None;
        }
        return Err(e);
    }

    let task_state = state.clone();
    let task_token = token.clone();
    state.spawn(async move {
        let state = task_state;
        let deadline = state.config.request_timeout();
        let finished = tokio::time::timeout(
            deadline,
            state.engine.finish(retrieval, manual.as_deref(), timings),
        )
        .await;
        let phase = match finished {
            Ok((outcome, err)) => {
                state.persist(&outcome).await;
                match (err, &outcome.run.status) {
                    (Some(e), _) => CompletionPhase::Failed((&e).into()),
                    (None, RunStatus::CompletionFailed { code, error }) => {
                        CompletionPhase::Failed(ApiError {
                            status: if code == "timeout" {
                                StatusCode::GATEWAY_TIMEOUT
                            } else {
                                StatusCode::BAD_GATEWAY
                            },
                            code: code.clone(),
                            message: error.clone(),
                            stage: Some(Stage::Complete.to_string()),
                        })
                    }
                    (None, _) => CompletionPhase::Done(Box::new(outcome.run)),
                }
            }
            Err(_) => {
                let e = EngineError::Deadline {
                    stage: Stage::Complete,
                };
                warn!("query {task_token}: {e}");
                CompletionPhase::Failed((&e).into())
            }
        };
        if let Some(s) = state.sessions.lock().unwrap().get_mut(&task_token) {
            s.completion = Some(phase);
        };
    });
    let selection_token = format!("{token}{SELECTION_SUFFIX}");
    Ok((
        StatusCode::ACCEPTED,
        Json(json!({"selection_token": selection_token})),
    )
        .into_response())
}

async fn completion_status(
    State(state): State<Arc<AppState>>,
    UrlPath(selection): UrlPath<String>,
) -> Result<Response, ApiError> {
    let token = selection
        .strip_suffix(SELECTION_SUFFIX)
        .ok_or_else(|| unknown(&selection))?
        .to_string();
    if !state.recover(&token) {
        return Err(unknown(&selection));
    }
    let run = {
        let sessions = state.sessions.lock().unwrap();
        match sessions.get(&token).and_then(|s| s.completion.as_ref()) {
            None => return Err(unknown(&selection)),
            Some(CompletionPhase::Pending) => {
                return Ok(Json(json!({"status": "pending", "query_id": token})).into_response())
            }
            Some(CompletionPhase::Failed(e)) => return Ok(failed(e)),
            Some(CompletionPhase::Done(run)) => run.clone(),
        }
    };
    let output_ref = run
        .output_image_ref
        .clone()
        .ok_or_else(|| internal("completed run has no output"))?;
    let png = imageio::read_file(&state.dir.join(&output_ref)).map_err(internal)?;
    Ok(Json(json!({
        "status": "done",
        "query_id": token,
        "chosen_reference": run.chosen_reference,
        "output_ref": output_ref,
        "output_b64": B64.encode(png),
    }))
    .into_response())
}

async fn run_report(
    State(state): State<Arc<AppState>>,
    UrlPath(run_id): UrlPath<String>,
) -> Result<Response, ApiError> {
    check_run_id(&run_id)?;
    let dir = run_dir(&state.config.runs, &run_id);
    if !dir.is_dir() {
        return Err(ApiError::new(
            StatusCode::NOT_FOUND,
            "not_found",
            format!("no run {run_id}"),
        ));
    }
    let path = dir.join(reports::REPORT_JSON);
    let value = match std::fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).map_err(internal)?,
        Err(_) => reports::assemble(&dir)?,
    };
    Ok(Json(value).into_response())
}

// ---------------------------------------------------------------------------

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Serves until interrupted, then lets running queries finish within the
/// configured grace period.
pub async fn serve(config: ServiceConfig) -> Result<(), CliError> {
    let state = AppState::new(config)?;
    let listen = state.config.listen.clone();
    let listener = tokio::net::TcpListener::bind(&listen)
        .await
        .map_err(|e| CliError::new("bind", format!("{listen}: {e}")))?;
    info!("listening on {listen}");
    eprintln!(
        "albumfill listening on http://{}",
        listener
            .local_addr()
            .map_err(|e| CliError::new("bind", e.to_string()))?
    );
    axum::serve(listener, router(state.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await
        .map_err(|e| CliError::new("serve", e.to_string()))?;
    state.drain(state.config.shutdown_grace()).await;
    Ok(())
}
