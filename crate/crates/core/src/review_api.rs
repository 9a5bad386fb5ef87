//! HTTP service for the human review phase.
//!
//! Reviewers edit each section's optimized prompt, ask for side-by-side
//! summaries under the optimized and edited prompts, and vote on which
//! side they prefer. Pairs are blind by default: until a vote is cast,
//! responses never say which side came from which prompt.
//!
//! State lives as JSON under `<run>/review/` (`session.json`,
//! `prompts.json`, `pairs.json`) and is rewritten after every change.

use std::collections::BTreeMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;
use tower_http::services::ServeDir;

use crate::apo_engine::{OptimizationTrace, PromptState};
use crate::corpus::{section_seed, SectionId};
use crate::llm_gateway::LlmRole;
use crate::metrics::ScoreCard;
use crate::rng::SplitMix64;
use crate::run::{write_atomic, Pipeline, RunError};

#[derive(Debug, Error)]
pub enum ReviewError {
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ReviewError {
    pub fn status(&self) -> StatusCode {
        match self {
            ReviewError::NotFound(_) => StatusCode::NOT_FOUND,
            ReviewError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ReviewError::Conflict(_) => StatusCode::CONFLICT,
            ReviewError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ReviewError {
    fn into_response(self) -> Response {
        (self.status(), Json(json!({ "error": self.to_string() }))).into_response()
    }
}

fn internal(e: impl std::fmt::Display) -> ReviewError {
    ReviewError::Internal(e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReviewerLabel {
    #[default]
    Expert,
    NonExpert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewSession {
    pub session_id: String,
    pub reviewer_label: ReviewerLabel,
    pub run_id: String,
    /// Seconds since the Unix epoch.
    pub created_at: u64,
}

/// Which prompt produced a summary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Apo,
    Edited,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Left,
    Right,
    Tie,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Vote {
    Apo,
    Edited,
    Tie,
}

/// Maps a screen-position choice to the prompt it refers to.
pub fn resolve_vote(order: [Side; 2], choice: Choice) -> Vote {
    let side = match choice {
        Choice::Left => order[0],
        Choice::Right => order[1],
        Choice::Tie => return Vote::Tie,
    };
    match side {
        Side::Apo => Vote::Apo,
        Side::Edited => Vote::Edited,
    }
}

/// Draws a presentation order: a heads coin shows the edited summary on the
/// left.
pub fn draw_order(rng: &mut SplitMix64) -> [Side; 2] {
    if rng.coin() {
        [Side::Edited, Side::Apo]
    } else {
        [Side::Apo, Side::Edited]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComparisonPair {
    pub pair_id: String,
    pub section: SectionId,
    pub record_id: String,
    pub apo_prompt_id: String,
    pub edited_prompt_id: String,
    pub summary_apo: String,
    pub summary_edited: String,
    /// `[left, right]`, fixed at creation.
    pub presentation_order: [Side; 2],
    pub vote: Option<Vote>,
}

impl ComparisonPair {
    fn text(&self, side: Side) -> &str {
        match side {
            Side::Apo => &self.summary_apo,
            Side::Edited => &self.summary_edited,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSummary {
    pub prefer_edited: f64,
    pub tie: f64,
    pub prefer_apo: f64,
    pub n_votes: usize,
    pub counts: VoteCounts,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteCounts {
    pub edited: usize,
    pub tie: usize,
    pub apo: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HumanVersion {
    pub version: u32,
    pub reviewer_label: ReviewerLabel,
    pub prompt: PromptState,
}

/// File-backed review state.
#[derive(Debug)]
pub struct ReviewStore {
    dir: PathBuf,
    pub session: ReviewSession,
    pub versions: BTreeMap<SectionId, Vec<HumanVersion>>,
    pub pairs: Vec<ComparisonPair>,
}

fn read_or<T: for<'de> Deserialize<'de>>(path: &Path, default: T) -> Result<T, ReviewError> {
    match fs::read(path) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| internal(format!("{}: {e}", path.display()))),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(default),
        Err(e) => Err(internal(format!("{}: {e}", path.display()))),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), ReviewError> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("review state serializes");
    bytes.push(b'\n');
    write_atomic(path, &bytes).map_err(|e| internal(format!("{}: {e}", path.display())))
}

impl ReviewStore {
    /// Loads the state in `dir`, starting a session if none exists.
    pub fn open(dir: &Path, run_id: &str, reviewer_label: ReviewerLabel) -> Result<Self, ReviewError> {
        fs::create_dir_all(dir).map_err(internal)?;
        let session_path = dir.join("session.json");
        let session = match read_or::<Option<ReviewSession>>(&session_path, None)? {
            Some(s) => s,
            None => {
                let created_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
                let digest = Sha256::digest(format!("{run_id}\0{created_at}\0{}", std::process::id()));
                let s = ReviewSession {
                    session_id: hex::encode(&digest[..8]),
                    reviewer_label,
                    run_id: run_id.to_string(),
                    created_at,
                };
                write_json(&session_path, &s)?;
                s
            }
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            session,
            versions: read_or(&dir.join("prompts.json"), BTreeMap::new())?,
            pairs: read_or(&dir.join("pairs.json"), Vec::new())?,
        })
    }

    fn save_versions(&self) -> Result<(), ReviewError> {
        write_json(&self.dir.join("prompts.json"), &self.versions)
    }

    fn save_pairs(&self) -> Result<(), ReviewError> {
        write_json(&self.dir.join("pairs.json"), &self.pairs)
    }

    /// Stores a new edit of `apo_final`; earlier versions are kept.
    pub fn add_version(
        &mut self,
        apo_final: &PromptState,
        text: &str,
        reviewer_label: ReviewerLabel,
    ) -> Result<PromptState, ReviewError> {
        if text.trim().is_empty() {
            return Err(ReviewError::BadRequest("prompt text is empty".into()));
        }
        let list = self.versions.entry(apo_final.section.clone()).or_default();
        let version = list.len() as u32 + 1;
        let label = match reviewer_label {
            ReviewerLabel::Expert => "expert",
            ReviewerLabel::NonExpert => "non_expert",
        };
        let prompt = PromptState::human_post_apo(apo_final, text, version, Some(label.to_string()));
        list.push(HumanVersion {
            version,
            reviewer_label,
            prompt: prompt.clone(),
        });
        self.save_versions()?;
        Ok(prompt)
    }

    pub fn latest_version(&self, section: &SectionId) -> Option<&HumanVersion> {
        self.versions.get(section).and_then(|v| v.last())
    }

    /// Appends a pair with the next sequential id.
    pub fn push_pair(&mut self, mut pair: ComparisonPair) -> Result<ComparisonPair, ReviewError> {
        pair.pair_id = format!("pair-{:05}", self.pairs.len() + 1);
        pair.vote = None;
        self.pairs.push(pair.clone());
        self.save_pairs()?;
        Ok(pair)
    }

    pub fn pair(&self, id: &str) -> Result<&ComparisonPair, ReviewError> {
        self.pairs
            .iter()
            .find(|p| p.pair_id == id)
            .ok_or_else(|| ReviewError::NotFound(format!("unknown pair {id}")))
    }

    /// Records a vote. A pair can be voted once.
    pub fn vote(&mut self, id: &str, choice: Choice) -> Result<Vote, ReviewError> {
        let pair = self
            .pairs
            .iter_mut()
            .find(|p| p.pair_id == id)
            .ok_or_else(|| ReviewError::NotFound(format!("unknown pair {id}")))?;
        if pair.vote.is_some() {
            return Err(ReviewError::Conflict(format!("pair {id} already has a vote")));
        }
        let vote = resolve_vote(pair.presentation_order, choice);
        pair.vote = Some(vote);
        self.save_pairs()?;
        Ok(vote)
    }

    pub fn summary(&self) -> Result<PreferenceSummary, ReviewError> {
        let mut counts = VoteCounts::default();
        for v in self.pairs.iter().filter_map(|p| p.vote) {
            match v {
                Vote::Edited => counts.edited += 1,
                Vote::Tie => counts.tie += 1,
                Vote::Apo => counts.apo += 1,
            }
        }
        let n = counts.edited + counts.tie + counts.apo;
        if n == 0 {
            return Err(ReviewError::Conflict("no votes yet".into()));
        }
        let frac = |c: usize| c as f64 / n as f64;
        Ok(PreferenceSummary {
            prefer_edited: frac(counts.edited),
            tie: frac(counts.tie),
            prefer_apo: frac(counts.apo),
            n_votes: n,
            counts,
        })
    }
}

/// What a client sees of a pair. Side identity appears only once the pair
/// is voted, or when the service runs unblinded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairView {
    pub pair_id: String,
    pub section: SectionId,
    pub record_id: String,
    pub dialogue: String,
    pub left: String,
    pub right: String,
    pub voted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub left_source: Option<Side>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub right_source: Option<Side>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vote: Option<Vote>,
}

pub struct AppState {
    pipeline: Pipeline,
    finals: BTreeMap<SectionId, OptimizationTrace>,
    store: Mutex<ReviewStore>,
    compare_lock: tokio::sync::Mutex<()>,
    unblinded: bool,
}

impl AppState {
    pub fn new(pipeline: Pipeline, reviewer_label: ReviewerLabel, unblinded: bool) -> Result<Self, RunError> {
        let finals = pipeline.traces()?;
        let run_id = pipeline
            .run
            .root
            .canonicalize()
            .ok()
            .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .unwrap_or_else(|| "run".into());
        let store = ReviewStore::open(&pipeline.run.review(), &run_id, reviewer_label).map_err(|e| RunError::Run {
            path: pipeline.run.review().display().to_string(),
            message: e.to_string(),
        })?;
        Ok(Self {
            pipeline,
            finals,
            store: Mutex::new(store),
            compare_lock: tokio::sync::Mutex::new(()),
            unblinded,
        })
    }

    fn store(&self) -> std::sync::MutexGuard<'_, ReviewStore> {
        self.store.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn section(&self, raw: &str) -> Result<(SectionId, &OptimizationTrace), ReviewError> {
        let id = SectionId::parse(raw).ok_or_else(|| ReviewError::NotFound("empty section name".into()))?;
        let trace = self
            .finals
            .get(&id)
            .ok_or_else(|| ReviewError::NotFound(format!("no optimized prompt for section {id}")))?;
        Ok((id, trace))
    }

    fn view(&self, pair: &ComparisonPair) -> PairView {
        let reveal = self.unblinded || pair.vote.is_some();
        let dialogue = self
            .pipeline
            .dataset
            .find(&pair.record_id)
            .map(|r| r.dialogue.clone())
            .unwrap_or_default();
        PairView {
            pair_id: pair.pair_id.clone(),
            section: pair.section.clone(),
            record_id: pair.record_id.clone(),
            dialogue,
            left: pair.text(pair.presentation_order[0]).to_string(),
            right: pair.text(pair.presentation_order[1]).to_string(),
            voted: pair.vote.is_some(),
            left_source: reveal.then_some(pair.presentation_order[0]),
            right_source: reveal.then_some(pair.presentation_order[1]),
            vote: pair.vote,
        }
    }
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, ReviewError> {
    serde_json::from_slice(body).map_err(|e| ReviewError::BadRequest(format!("invalid request body: {e}")))
}

#[derive(Serialize)]
struct SectionView<'a> {
    section: &'a SectionId,
    apo_final: &'a PromptState,
    validation: &'a ScoreCard,
    versions: usize,
    pairs: usize,
}

async fn list_sections(State(app): State<Arc<AppState>>) -> Result<Response, ReviewError> {
    if app.finals.is_empty() {
        return Err(ReviewError::NotFound("run has no optimized sections".into()));
    }
    let store = app.store();
    let views: Vec<SectionView<'_>> = app
        .finals
        .iter()
        .map(|(s, t)| SectionView {
            section: s,
            apo_final: &t.final_prompt,
            validation: &t.validation,
            versions: store.versions.get(s).map_or(0, Vec::len),
            pairs: store.pairs.iter().filter(|p| &p.section == s).count(),
        })
        .collect();
    Ok(Json(views).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditBody {
    text: String,
    #[serde(default)]
    reviewer_label: Option<ReviewerLabel>,
}

async fn put_prompt(
    State(app): State<Arc<AppState>>,
    UrlPath(section): UrlPath<String>,
    body: Bytes,
) -> Result<Response, ReviewError> {
    let (_, trace) = app.section(&section)?;
    let body: EditBody = parse_body(&body)?;
    let mut store = app.store();
    let label = body.reviewer_label.unwrap_or(store.session.reviewer_label);
    let prompt = store.add_version(&trace.final_prompt, &body.text, label)?;
    Ok((StatusCode::CREATED, Json(prompt)).into_response())
}

async fn list_versions(
    State(app): State<Arc<AppState>>,
    UrlPath(section): UrlPath<String>,
) -> Result<Response, ReviewError> {
    let (id, trace) = app.section(&section)?;
    let store = app.store();
    let versions = store.versions.get(&id).cloned().unwrap_or_default();
    Ok(Json(json!({ "apo_final": trace.final_prompt, "versions": versions })).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CompareBody {
    n: usize,
}

async fn compare(
    State(app): State<Arc<AppState>>,
    UrlPath(section): UrlPath<String>,
    body: Bytes,
) -> Result<Response, ReviewError> {
    let (id, trace) = app.section(&section)?;
    let body: CompareBody = parse_body(&body)?;
    if body.n == 0 {
        return Err(ReviewError::BadRequest("n must be at least 1".into()));
    }
    let _serial = app.compare_lock.lock().await;
    let (edited, existing) = {
        let store = app.store();
        let edited = store
            .latest_version(&id)
            .ok_or_else(|| ReviewError::Conflict(format!("section {id} has no human edit yet")))?
            .prompt
            .clone();
        (edited, store.pairs.iter().filter(|p| p.section == id).count())
    };
    let apo_final = trace.final_prompt.clone();
    let split = app.pipeline.split(&id).map_err(internal)?;
    let mut records = split.evaluation;
    // Seeded by run seed, section and how many pairs the section already
    // has, so repeated requests draw fresh but reproducible samples.
    let mut rng = SplitMix64::new(section_seed(app.pipeline.config.seed, &id) ^ (existing as u64).wrapping_mul(0x9E37_79B9));
    rng.shuffle(&mut records);
    records.truncate(body.n);
    let orders: Vec<[Side; 2]> = records.iter().map(|_| draw_order(&mut rng)).collect();

    let worker = app.clone();
    let generated = tokio::task::spawn_blocking(move || {
        let apo = worker.pipeline.apo();
        let mentee = LlmRole::mentee(worker.pipeline.config.mentee_model.clone());
        worker.pipeline.gateway.exec().try_map(&records, |r| {
            let a = apo.forward(&apo_final, r, &mentee)?;
            let e = apo.forward(&edited, r, &mentee)?;
            Ok::<_, crate::apo_engine::ApoError>((r.id.clone(), a, e, apo_final.id.clone(), edited.id.clone()))
        })
    })
    .await
    .map_err(internal)?
    .map_err(internal)?;

    let mut store = app.store();
    let mut views = Vec::with_capacity(generated.len());
    for ((record_id, summary_apo, summary_edited, apo_prompt_id, edited_prompt_id), order) in
        generated.into_iter().zip(orders)
    {
        let pair = store.push_pair(ComparisonPair {
            pair_id: String::new(),
            section: id.clone(),
            record_id,
            apo_prompt_id,
            edited_prompt_id,
            summary_apo,
            summary_edited,
            presentation_order: order,
            vote: None,
        })?;
        views.push(app.view(&pair));
    }
    Ok((StatusCode::CREATED, Json(json!({ "pairs": views }))).into_response())
}

#[derive(Deserialize)]
struct PairFilter {
    #[serde(default)]
    unvoted: Option<bool>,
    #[serde(default)]
    section: Option<String>,
}

async fn list_pairs(State(app): State<Arc<AppState>>, Query(filter): Query<PairFilter>) -> Result<Response, ReviewError> {
    let section = match &filter.section {
        Some(s) => Some(SectionId::parse(s).ok_or_else(|| ReviewError::BadRequest("empty section".into()))?),
        None => None,
    };
    let store = app.store();
    let views: Vec<PairView> = store
        .pairs
        .iter()
        .filter(|p| !filter.unvoted.unwrap_or(false) || p.vote.is_none())
        .filter(|p| section.as_ref().is_none_or(|s| &p.section == s))
        .map(|p| app.view(p))
        .collect();
    Ok(Json(views).into_response())
}

async fn get_pair(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Result<Response, ReviewError> {
    let store = app.store();
    let pair = store.pair(&id)?;
    Ok(Json(app.view(pair)).into_response())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct VoteBody {
    choice: Choice,
}

async fn vote(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    body: Bytes,
) -> Result<Response, ReviewError> {
    let mut store = app.store();
    store.pair(&id)?;
    let body: VoteBody = parse_body(&body)?;
    let vote = store.vote(&id, body.choice)?;
    Ok(Json(json!({ "pair_id": id, "choice": body.choice, "vote": vote })).into_response())
}

async fn preference_summary(State(app): State<Arc<AppState>>) -> Result<Response, ReviewError> {
    Ok(Json(app.store().summary()?).into_response())
}

/// API routes, plus the static UI bundle at `/` when `ui_dir` is given.
pub fn router(state: Arc<AppState>, ui_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/sections", get(list_sections))
        .route("/sections/{s}/prompt", put(put_prompt))
        .route("/sections/{s}/versions", get(list_versions))
        .route("/sections/{s}/compare", post(compare))
        .route("/pairs", get(list_pairs))
        .route("/pairs/{id}", get(get_pair))
        .route("/pairs/{id}/vote", post(vote))
        .route("/preferences/summary", get(preference_summary))
        .with_state(state);
    match ui_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    }
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub addr: SocketAddr,
    pub unblinded: bool,
    pub ui_dir: Option<PathBuf>,
    pub reviewer_label: ReviewerLabel,
}

/// A server running on a background thread; dropping it shuts it down.
pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Option<tokio::sync::oneshot::Sender<()>>,
    thread: Option<std::thread::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.addr)
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

fn runtime() -> std::io::Result<tokio::runtime::Runtime> {
    tokio::runtime::Builder::new_multi_thread().enable_all().build()
}

fn build_app(run_dir: &Path, opts: &ServeOptions) -> Result<Router, RunError> {
    let pipeline = Pipeline::open(run_dir)?;
    let state = Arc::new(AppState::new(pipeline, opts.reviewer_label, opts.unblinded)?);
    Ok(router(state, opts.ui_dir.as_deref()))
}

/// Binds and serves on a background thread.
pub fn spawn(run_dir: &Path, opts: ServeOptions) -> Result<ServerHandle, RunError> {
    let app = build_app(run_dir, &opts)?;
    let std_listener = std::net::TcpListener::bind(opts.addr).map_err(|e| RunError::Io {
        path: opts.addr.to_string(),
        reason: e.to_string(),
    })?;
    std_listener.set_nonblocking(true).map_err(|e| RunError::Io {
        path: opts.addr.to_string(),
        reason: e.to_string(),
    })?;
    let addr = std_listener.local_addr().expect("bound listener has an address");
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let thread = std::thread::spawn(move || {
        let rt = runtime().expect("tokio runtime");
        rt.block_on(async move {
            let listener = tokio::net::TcpListener::from_std(std_listener).expect("listener");
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async {
                    let _ = rx.await;
                })
                .await;
        });
    });
    Ok(ServerHandle {
        addr,
        shutdown: Some(tx),
        thread: Some(thread),
    })
}

/// Serves until the process is stopped. `on_ready` receives the bound
/// address.
pub fn serve_forever(run_dir: &Path, opts: ServeOptions, on_ready: impl FnOnce(SocketAddr)) -> Result<(), RunError> {
    let app = build_app(run_dir, &opts)?;
    let rt = runtime().map_err(|e| RunError::Io {
        path: "tokio runtime".into(),
        reason: e.to_string(),
    })?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(opts.addr).await.map_err(|e| RunError::Io {
            path: opts.addr.to_string(),
            reason: e.to_string(),
        })?;
        on_ready(listener.local_addr().expect("bound listener has an address"));
        axum::serve(listener, app).await.map_err(|e| RunError::Io {
            path: opts.addr.to_string(),
            reason: e.to_string(),
        })
    })
}
