//! HTTP labeling service: one interactive experiment per session.
//!
//! Reads are served from per-session snapshots and never wait for training.
//! Label commits are serialized per session; while one runs, `queries` and
//! further submissions answer 503 with `Retry-After`. Every session lives in
//! its own run directory under the service root, and a restarted service
//! rebuilds it by replaying the recorded label batches.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use anyhow::{anyhow, Context};
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use querysynth_core::generative::GenerativeModel;
use querysynth_core::harness::{Evaluator, Experiment, ExperimentConfig, OracleKind};
use serde::{Deserialize, Serialize};

use crate::records::{self, LabelBatch, QueryRecord};
use crate::rundir::{write_atomic, RunDir};
use crate::runner::generative_for;
use crate::wire::*;

pub const DEFAULT_HEATMAP_RESOLUTION: usize = 51;

/// Settings shared by every session of one service.
#[derive(Debug, Clone)]
pub struct ServiceConfig {
    /// Directory holding one run directory per session.
    pub root: PathBuf,
    /// Configuration overrides applied before each request's own.
    pub template: toml::Table,
    /// Reused instead of fitting a model per session.
    pub generative: Option<GenerativeModel>,
    pub heatmap_resolution: usize,
    pub retry_after_secs: u64,
}

impl ServiceConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into(), template: toml::Table::new(), generative: None, heatmap_resolution: DEFAULT_HEATMAP_RESOLUTION, retry_after_secs: 1 }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
    retry_after: Option<u64>,
}

impl ApiError {
    fn new(status: StatusCode, error: impl Into<String>) -> Self {
        Self { status, body: ErrorBody { schema_version: SCHEMA_VERSION, error: error.into(), field: None }, retry_after: None }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, format!("no session {id:?}"))
    }

    fn busy(secs: u64) -> Self {
        let mut e = Self::new(StatusCode::SERVICE_UNAVAILABLE, "retraining; retry later");
        e.retry_after = Some(secs);
        e
    }

    fn unprocessable(error: impl Into<String>, field: &str) -> Self {
        let mut e = Self::new(StatusCode::UNPROCESSABLE_ENTITY, error);
        e.body.field = Some(field.to_string());
        e
    }

    /// A rejected label batch. Core messages start with the field path, e.g. `labels.class: ...`.
    fn invalid(msg: String) -> Self {
        let text = msg.strip_prefix("configuration error: ").unwrap_or(&msg).to_string();
        let field = text.split_once(':').map(|(f, _)| f.trim().to_string()).filter(|f| f.starts_with("labels"));
        let mut e = Self::new(StatusCode::UNPROCESSABLE_ENTITY, text);
        e.body.field = field;
        e
    }

    fn internal(e: anyhow::Error) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, format!("{e:#}"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut r = (self.status, Json(self.body)).into_response();
        if let Some(s) = self.retry_after {
            r.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(s));
        }
        r
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Persisted per-session settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SessionMeta {
    schema_version: u32,
    session_id: String,
    heatmap_resolution: usize,
    shadow_oracle: bool,
    stopped: bool,
}

struct Inner {
    exp: Experiment,
    meta: SessionMeta,
    shadow: Option<Evaluator>,
    history: Vec<HistoryPoint>,
    /// The last committed batch and its acknowledgement, for idempotent resubmission.
    last: Option<(Vec<Label>, LabelsResponse)>,
}

struct Snapshot {
    queries: QueriesResponse,
    summary: SummaryResponse,
}

pub struct Session {
    id: String,
    dir: RunDir,
    inner: Mutex<Inner>,
    snapshot: RwLock<Arc<Snapshot>>,
    busy: AtomicBool,
}

fn history_path(dir: &RunDir) -> PathBuf {
    dir.path("history.jsonl")
}

fn meta_path(dir: &RunDir) -> PathBuf {
    dir.path("session.json")
}

impl Inner {
    fn status(&self) -> SessionStatus {
        if self.exp.is_stopped() {
            SessionStatus::Stopped
        } else if self.exp.is_finished() {
            SessionStatus::Finished
        } else {
            SessionStatus::Ready
        }
    }

    fn snapshot(&self) -> anyhow::Result<Snapshot> {
        let id = &self.meta.session_id;
        let status = self.status();
        let queries = match (status, self.exp.pending()) {
            (SessionStatus::Ready, Some(p)) => p.queries.iter().map(WireQuery::from).collect(),
            _ => Vec::new(),
        };
        let heatmap = match self.exp.domain() {
            querysynth_core::generative::Domain::Nav(_) => Some(self.exp.grid_summary(self.meta.heatmap_resolution).map_err(|e| anyhow!("{e}"))?.into()),
            querysynth_core::generative::Domain::Class(_) => None,
        };
        Ok(Snapshot {
            queries: QueriesResponse { schema_version: SCHEMA_VERSION, session_id: id.clone(), round: self.exp.round(), status, queries },
            summary: SummaryResponse {
                schema_version: SCHEMA_VERSION,
                session_id: id.clone(),
                round: self.exp.round(),
                labels: self.exp.labels(),
                status,
                dataset_size: self.exp.dataset().len(),
                heatmap,
                history: self.history.clone(),
                stop: format!("/sessions/{id}/stop"),
            },
        })
    }

    /// Shadow-oracle metrics of the current ensemble.
    fn measure(&mut self) -> anyhow::Result<Option<HistoryPoint>> {
        let Some(ev) = self.shadow.as_mut() else { return Ok(None) };
        let e = ev.evaluate(self.exp.ensemble(), self.exp.generative(), self.exp.labels(), self.exp.round(), false).map_err(|e| anyhow!("{e}"))?;
        Ok(Some(HistoryPoint::from(&e.record)))
    }

    /// Generates the next round if needed and records its syntheses.
    fn propose(&mut self, dir: &RunDir) -> anyhow::Result<()> {
        let lambda = self.exp.config().lambda;
        let had = self.exp.pending().is_some();
        if let Some(p) = self.exp.propose_round().map_err(|e| anyhow!("{e}"))? {
            if !had {
                let qs: Vec<QueryRecord> = p.syntheses.iter().map(|s| QueryRecord::new(p.round, lambda.get(s.af), s)).collect();
                records::append(&dir.queries(), &qs)?;
            }
        }
        Ok(())
    }
}

impl Session {
    fn publish(&self, inner: &Inner) -> anyhow::Result<()> {
        let snap = inner.snapshot()?;
        *self.snapshot.write().expect("snapshot lock") = Arc::new(snap);
        Ok(())
    }

    fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().expect("snapshot lock").clone()
    }

    fn from_inner(id: String, dir: RunDir, inner: Inner) -> anyhow::Result<Self> {
        let snap = inner.snapshot()?;
        Ok(Self { id, dir, inner: Mutex::new(inner), snapshot: RwLock::new(Arc::new(snap)), busy: AtomicBool::new(false) })
    }

    fn create(cfg: &ServiceConfig, id: String, config: ExperimentConfig, heatmap_resolution: usize, shadow_oracle: bool) -> anyhow::Result<Self> {
        let dir = RunDir::create(cfg.root.join(&id))?;
        let generative = match &cfg.generative {
            Some(m) => m.clone(),
            None => generative_for(&config, None)?,
        };
        dir.write_config(&config)?;
        dir.write_generative(&generative)?;
        let meta = SessionMeta { schema_version: SCHEMA_VERSION, session_id: id.clone(), heatmap_resolution, shadow_oracle, stopped: false };
        write_atomic(&meta_path(&dir), &serde_json::to_string_pretty(&meta)?)?;
        let exp = Experiment::with_model(config.clone(), generative).map_err(|e| anyhow!("{e}"))?;
        for f in [dir.labels(), dir.queries(), history_path(&dir)] {
            std::fs::File::create(&f)?;
        }
        records::write(&dir.dataset(), exp.dataset())?;
        dir.write_ensemble(exp.ensemble())?;
        let shadow = if shadow_oracle { Some(Evaluator::from_config(&config).map_err(|e| anyhow!("{e}"))?) } else { None };
        let mut inner = Inner { exp, meta, shadow, history: Vec::new(), last: None };
        if let Some(h) = inner.measure()? {
            records::append(&history_path(&dir), &[h.clone()])?;
            inner.history.push(h);
        }
        inner.propose(&dir)?;
        Self::from_inner(id, dir, inner)
    }

    /// Rebuilds a session from its run directory by replaying its label batches.
    fn restore(dir: RunDir) -> anyhow::Result<Self> {
        let meta: SessionMeta = crate::rundir::read_with(&meta_path(&dir), |t| Ok(serde_json::from_str(t)?))?;
        let config = dir.read_config()?;
        let generative = dir.read_generative()?;
        let batches: Vec<LabelBatch> = records::read(&dir.labels())?;
        let pairs: Vec<Vec<(u64, usize)>> = batches.iter().map(LabelBatch::pairs).collect();
        let mut exp = Experiment::replay(config.clone(), generative, &pairs).map_err(|e| anyhow!("replaying {}: {e}", dir.root().display()))?;
        // the last round may not have reached these files before a crash
        records::write(&dir.dataset(), exp.dataset())?;
        dir.write_ensemble(exp.ensemble())?;
        if meta.stopped {
            exp.stop();
        }
        let shadow = if meta.shadow_oracle { Some(Evaluator::from_config(&config).map_err(|e| anyhow!("{e}"))?) } else { None };
        let history = records::read(&history_path(&dir))?;
        let last = batches.last().map(|b| {
            let ack = LabelsResponse {
                schema_version: SCHEMA_VERSION,
                session_id: meta.session_id.clone(),
                round: exp.round(),
                labels_total: exp.labels(),
                retrain: RetrainStatus { state: RetrainState::Done, token: exp.round(), steps: None },
                duplicate: false,
            };
            (b.labels.clone(), ack)
        });
        let id = meta.session_id.clone();
        let mut inner = Inner { exp, meta, shadow, history, last };
        // proposals made before the restart are already on disk, so nothing is recorded here
        inner.exp.propose_round().map_err(|e| anyhow!("{e}"))?;
        Self::from_inner(id, dir, inner)
    }

    fn same_labels(a: &[Label], b: &[Label]) -> bool {
        let mut a = a.to_vec();
        let mut b = b.to_vec();
        a.sort_by_key(|l| l.id);
        b.sort_by_key(|l| l.id);
        a == b
    }

    /// Checks a batch without committing it. `Ok(Some)` is a repeat of the last batch.
    fn check(&self, inner: &Inner, labels: &[Label]) -> ApiResult<Option<LabelsResponse>> {
        if let Some((prev, ack)) = &inner.last {
            let pending_ids = inner.exp.pending().map(|p| p.queries.iter().map(|q| q.id).collect::<Vec<_>>()).unwrap_or_default();
            if Self::same_labels(prev, labels) && !labels.iter().any(|l| pending_ids.contains(&l.id)) {
                return Ok(Some(LabelsResponse { duplicate: true, ..ack.clone() }));
            }
        }
        match inner.status() {
            SessionStatus::Stopped => return Err(ApiError::new(StatusCode::CONFLICT, "session is stopped")),
            SessionStatus::Finished => return Err(ApiError::new(StatusCode::CONFLICT, "label budget is spent")),
            _ => {}
        }
        let pairs: Vec<(u64, usize)> = labels.iter().map(|l| (l.id, l.class)).collect();
        inner.exp.validate_labels(&pairs).map_err(|e| ApiError::invalid(e.to_string()))?;
        Ok(None)
    }

    /// Commits a validated batch, persists it, retrains, and proposes the next round.
    fn commit(&self, inner: &mut Inner, labels: &[Label]) -> anyhow::Result<LabelsResponse> {
        let pairs: Vec<(u64, usize)> = labels.iter().map(|l| (l.id, l.class)).collect();
        let round = inner.exp.round();
        let before = inner.exp.dataset().len();
        let report = inner.exp.commit_labels(&pairs).map_err(|e| anyhow!("{e}"))?;
        records::append(&self.dir.labels(), &[LabelBatch::new(round, &pairs)])?;
        records::append(&self.dir.dataset(), &inner.exp.dataset()[before..])?;
        self.dir.write_ensemble(inner.exp.ensemble())?;
        if let Some(h) = inner.measure()? {
            records::append(&history_path(&self.dir), &[h.clone()])?;
            inner.history.push(h);
        }
        inner.propose(&self.dir)?;
        let ack = LabelsResponse {
            schema_version: SCHEMA_VERSION,
            session_id: self.id.clone(),
            round: inner.exp.round(),
            labels_total: inner.exp.labels(),
            retrain: RetrainStatus { state: RetrainState::Done, token: report.round, steps: Some(report.train_steps) },
            duplicate: false,
        };
        inner.last = Some((labels.to_vec(), ack.clone()));
        self.publish(inner)?;
        Ok(ack)
    }

    fn stop(&self) -> anyhow::Result<()> {
        let mut inner = self.inner.lock().expect("session lock");
        inner.exp.stop();
        inner.meta.stopped = true;
        write_atomic(&meta_path(&self.dir), &serde_json::to_string_pretty(&inner.meta)?)?;
        self.publish(&inner)
    }
}

/// Clears the busy flag when dropped.
struct BusyGuard(Arc<Session>);

impl Drop for BusyGuard {
    fn drop(&mut self) {
        self.0.busy.store(false, Ordering::Release);
    }
}

pub struct AppState {
    cfg: ServiceConfig,
    sessions: tokio::sync::Mutex<HashMap<String, Arc<Session>>>,
}

impl AppState {
    pub fn new(cfg: ServiceConfig) -> anyhow::Result<Arc<Self>> {
        std::fs::create_dir_all(&cfg.root).with_context(|| format!("creating {}", cfg.root.display()))?;
        Ok(Arc::new(Self { cfg, sessions: tokio::sync::Mutex::new(HashMap::new()) }))
    }

    /// Looks a session up, restoring it from disk on first use.
    async fn session(&self, id: &str) -> ApiResult<Arc<Session>> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_hexdigit() || c == '-') {
            return Err(ApiError::not_found(id));
        }
        let mut map = self.sessions.lock().await;
        if let Some(s) = map.get(id) {
            return Ok(s.clone());
        }
        let path = self.cfg.root.join(id);
        if !meta_path(&RunDir::create(&path).map_err(ApiError::internal)?).is_file() {
            let _ = std::fs::remove_dir(&path);
            return Err(ApiError::not_found(id));
        }
        let dir = RunDir::open(path).map_err(ApiError::internal)?;
        let s = tokio::task::spawn_blocking(move || Session::restore(dir)).await.map_err(|e| ApiError::internal(e.into()))?.map_err(ApiError::internal)?;
        let s = Arc::new(s);
        map.insert(id.to_string(), s.clone());
        Ok(s)
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/queries", get(get_queries))
        .route("/sessions/{id}/labels", post(post_labels))
        .route("/sessions/{id}/summary", get(get_summary))
        .route("/sessions/{id}/stop", post(post_stop))
        .with_state(state)
}

fn session_config(cfg: &ServiceConfig, req: &CreateRequest) -> anyhow::Result<ExperimentConfig> {
    let mut table = cfg.template.clone();
    if let Some(v) = &req.config {
        let over: toml::Table = serde_json::from_value(v.clone()).context("config must be an object of configuration keys")?;
        for (k, v) in over {
            crate::config::assign(&mut table, &[k], v)?;
        }
    }
    table.insert("oracle".into(), toml::Value::String("interactive".into()));
    let config = crate::config::from_table(table)?;
    debug_assert_eq!(config.oracle, OracleKind::Interactive);
    Ok(config)
}

async fn create_session(State(app): State<Arc<AppState>>, body: Option<Json<CreateRequest>>) -> ApiResult<(StatusCode, Json<CreateResponse>)> {
    let req = body.map(|Json(b)| b).unwrap_or_default();
    let config = session_config(&app.cfg, &req).map_err(|e| ApiError::unprocessable(format!("{e:#}"), "config"))?;
    let resolution = req.heatmap_resolution.unwrap_or(app.cfg.heatmap_resolution);
    if resolution == 0 {
        return Err(ApiError::unprocessable("heatmap_resolution must be positive", "heatmap_resolution"));
    }
    let id = uuid::Uuid::new_v4().to_string();
    let cfg = app.cfg.clone();
    let sid = id.clone();
    let shadow = req.shadow_oracle.unwrap_or(true);
    let session = tokio::task::spawn_blocking(move || Session::create(&cfg, sid, config, resolution, shadow))
        .await
        .map_err(|e| ApiError::internal(e.into()))?
        .map_err(ApiError::internal)?;
    let snap = session.snapshot();
    app.sessions.lock().await.insert(id.clone(), Arc::new(session));
    Ok((StatusCode::CREATED, Json(CreateResponse { schema_version: SCHEMA_VERSION, session_id: id, round: snap.queries.round, status: snap.queries.status })))
}

async fn get_queries(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<QueriesResponse>> {
    let s = app.session(&id).await?;
    if s.busy.load(Ordering::Acquire) {
        return Err(ApiError::busy(app.cfg.retry_after_secs));
    }
    Ok(Json(s.snapshot().queries.clone()))
}

#[derive(Debug, Default, Deserialize)]
struct LabelsParams {
    /// `async` returns 202 immediately and retrains in the background.
    #[serde(default)]
    mode: Option<String>,
}

async fn post_labels(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(params): Query<LabelsParams>,
    body: Result<Json<LabelsRequest>, axum::extract::rejection::JsonRejection>,
) -> ApiResult<Response> {
    let Json(req) = body.map_err(|e| ApiError::unprocessable(e.body_text(), "labels"))?;
    if let Some(v) = req.schema_version {
        if v != SCHEMA_VERSION {
            return Err(ApiError::unprocessable(format!("unsupported schema_version {v}"), "schema_version"));
        }
    }
    let asynchronous = match params.mode.as_deref() {
        None | Some("sync") => false,
        Some("async") => true,
        Some(other) => return Err(ApiError::new(StatusCode::BAD_REQUEST, format!("unknown mode {other:?}"))),
    };
    let s = app.session(&id).await?;
    if s.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
        return Err(ApiError::busy(app.cfg.retry_after_secs));
    }
    let guard = BusyGuard(s.clone());
    let labels = req.labels;
    let batch = labels.clone();
    let work = move || -> ApiResult<LabelsResponse> {
        let guard = guard;
        let session = &guard.0;
        let mut inner = session.inner.lock().expect("session lock");
        if let Some(dup) = session.check(&inner, &batch)? {
            return Ok(dup);
        }
        session.commit(&mut inner, &batch).map_err(ApiError::internal)
    };
    if asynchronous {
        // validate up front so a bad batch is still rejected synchronously
        {
            let inner = s.inner.lock().expect("session lock");
            if let Some(dup) = s.check(&inner, &labels).inspect_err(|_| s.busy.store(false, Ordering::Release))? {
                s.busy.store(false, Ordering::Release);
                return Ok(Json(dup).into_response());
            }
        }
        let token = s.snapshot().queries.round + 1;
        tokio::task::spawn_blocking(work);
        let ack = LabelsResponse {
            schema_version: SCHEMA_VERSION,
            session_id: id,
            round: token - 1,
            labels_total: s.snapshot().summary.labels,
            retrain: RetrainStatus { state: RetrainState::Pending, token, steps: None },
            duplicate: false,
        };
        let mut r = (StatusCode::ACCEPTED, Json(ack)).into_response();
        r.headers_mut().insert(header::RETRY_AFTER, HeaderValue::from(app.cfg.retry_after_secs));
        return Ok(r);
    }
    let ack = tokio::task::spawn_blocking(work).await.map_err(|e| ApiError::internal(e.into()))??;
    Ok(Json(ack).into_response())
}

async fn get_summary(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SummaryResponse>> {
    let s = app.session(&id).await?;
    let mut summary = s.snapshot().summary.clone();
    if s.busy.load(Ordering::Acquire) {
        summary.status = SessionStatus::Retraining;
    }
    Ok(Json(summary))
}

async fn post_stop(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<SummaryResponse>> {
    let s = app.session(&id).await?;
    if s.busy.compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire).is_err() {
        return Err(ApiError::busy(app.cfg.retry_after_secs));
    }
    let guard = BusyGuard(s.clone());
    tokio::task::spawn_blocking(move || guard.0.stop()).await.map_err(|e| ApiError::internal(e.into()))?.map_err(ApiError::internal)?;
    Ok(Json(s.snapshot().summary.clone()))
}

/// Serves until ctrl-c.
pub async fn serve(cfg: ServiceConfig, addr: std::net::SocketAddr) -> anyhow::Result<()> {
    let app = router(AppState::new(cfg)?);
    let listener = tokio::net::TcpListener::bind(addr).await.with_context(|| format!("binding {addr}"))?;
    eprintln!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
