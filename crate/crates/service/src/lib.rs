//! HTTP API over the generation pipeline.
//!
//! | route | |
//! |---|---|
//! | `GET  /api/status` | loaded checkpoint |
//! | `POST /api/clips` | queue a clip batch, returns a job id |
//! | `GET  /api/clips` | stored clip metadata |
//! | `GET  /api/clips/{id}.mid`, `.json` | MIDI bytes or piano-roll notes |
//! | `GET/POST/DELETE /api/seeds` | seed marks |
//! | `POST /api/songs` | queue a song, returns a job id |
//! | `GET  /api/songs` | stored song ids |
//! | `GET  /api/songs/{id}.mid`, `.json` | MIDI bytes or manifest |
//! | `GET  /api/jobs/{id}` | job status |
//!
//! Anything else falls through to the static directory, if one is set.

pub mod jobs;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use bandsmith_core::assembler::{parse_template, TemplateDefaults};
use bandsmith_core::encoder::decode;
use bandsmith_core::pipeline::{compose, make_clips, Model, StudioConfig};
use bandsmith_core::sampler::{MAX_SECTION_MEASURES, MIN_SECTION_MEASURES};
use bandsmith_core::score::{ChannelId, Key, Score};
use bandsmith_core::workspace::{ClipMeta, SeedMark, Workspace, WorkspaceError};
use serde::{Deserialize, Serialize};
use tokio::sync::Semaphore;
use tower_http::cors::CorsLayer;
use tower_http::services::ServeDir;

use crate::jobs::{Job, JobKind, JobRegistry};

pub const DEFAULT_WORKERS: usize = 2;
pub const MAX_CLIPS_PER_REQUEST: usize = 64;

#[derive(Debug, thiserror::Error)]
pub enum ApiError {
    #[error("{0}")]
    BadRequest(String),
    #[error("{0}")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Internal(String),
}

impl ApiError {
    fn status(&self) -> StatusCode {
        match self {
            ApiError::BadRequest(_) => StatusCode::BAD_REQUEST,
            ApiError::NotFound(_) => StatusCode::NOT_FOUND,
            ApiError::Conflict(_) => StatusCode::CONFLICT,
            ApiError::Internal(_) => StatusCode::INTERNAL_SERVER_ERROR,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        if let ApiError::Internal(msg) = &self {
            log::error!("{msg}");
        }
        (self.status(), Json(serde_json::json!({ "error": self.to_string() }))).into_response()
    }
}

impl From<WorkspaceError> for ApiError {
    fn from(e: WorkspaceError) -> Self {
        match e {
            WorkspaceError::UnknownClip(_) | WorkspaceError::UnknownSong(_) | WorkspaceError::InvalidId(_) => {
                ApiError::NotFound(e.to_string())
            }
            other => ApiError::Internal(other.to_string()),
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Inner {
    ws: Workspace,
    model: Option<Arc<Model>>,
    config: StudioConfig,
    jobs: JobRegistry,
    workers: Arc<Semaphore>,
    /// Serializes read-modify-write of the seed registry.
    seeds: Mutex<()>,
}

#[derive(Clone)]
pub struct AppState(Arc<Inner>);

impl AppState {
    pub fn new(ws: Workspace, model: Option<Model>, config: StudioConfig, workers: usize) -> Self {
        AppState(Arc::new(Inner {
            ws,
            model: model.map(Arc::new),
            config,
            jobs: JobRegistry::default(),
            workers: Arc::new(Semaphore::new(workers)),
            seeds: Mutex::new(()),
        }))
    }

    pub fn workspace(&self) -> &Workspace {
        &self.0.ws
    }

    pub fn job(&self, id: &str) -> Option<Job> {
        self.0.jobs.get(id)
    }

    fn model(&self) -> ApiResult<Arc<Model>> {
        self.0
            .model
            .clone()
            .ok_or_else(|| ApiError::Conflict("no checkpoint loaded".into()))
    }

    /// Queues `work` on the worker pool and returns the job record.
    fn spawn_job<F>(&self, kind: JobKind, request: serde_json::Value, work: F) -> Job
    where
        F: FnOnce(&AppState) -> Result<Vec<String>, String> + Send + 'static,
    {
        let job = self.0.jobs.create(kind, request);
        let state = self.clone();
        let id = job.id.clone();
        tokio::spawn(async move {
            let Ok(_permit) = state.0.workers.clone().acquire_owned().await else {
                return;
            };
            state.0.jobs.start(&id);
            let worker_state = state.clone();
            let outcome = tokio::task::spawn_blocking(move || work(&worker_state)).await;
            match outcome {
                Ok(Ok(ids)) => {
                    state.0.jobs.finish(&id, ids);
                }
                Ok(Err(e)) => {
                    log::warn!("{id} failed: {e}");
                    state.0.jobs.fail(&id, e);
                }
                Err(e) => {
                    state.0.jobs.fail(&id, format!("worker panicked: {e}"));
                }
            }
        });
        job
    }
}

pub fn router(state: AppState, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/api/status", get(status))
        .route("/api/clips", get(list_clips).post(create_clips))
        .route("/api/clips/{file}", get(clip_file))
        .route("/api/seeds", get(list_seeds).post(mark_seed).delete(unmark_seed))
        .route("/api/songs", get(list_songs).post(create_song))
        .route("/api/songs/{file}", get(song_file))
        .route("/api/jobs/{id}", get(get_job))
        .with_state(state);
    let app = match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api,
    };
    app.layer(CorsLayer::permissive())
}

fn parse_body<T: serde::de::DeserializeOwned>(body: &Bytes) -> ApiResult<T> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))
}

fn accepted(job: Job) -> Response {
    (StatusCode::ACCEPTED, Json(serde_json::json!({ "job_id": job.id, "job": job }))).into_response()
}

/// Splits `abc.mid` into `("abc", "mid")`.
fn split_file(file: &str) -> ApiResult<(&str, &str)> {
    match file.rsplit_once('.') {
        Some((id, ext @ ("mid" | "json"))) => Ok((id, ext)),
        _ => Err(ApiError::NotFound(format!("no such artifact {file}"))),
    }
}

fn midi_response(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "audio/midi")], bytes).into_response()
}

fn read_artifact(path: &Path) -> ApiResult<Vec<u8>> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => ApiError::NotFound(format!("{} not found", path.display())),
        _ => ApiError::Internal(format!("{}: {e}", path.display())),
    })
}

async fn status(State(state): State<AppState>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "checkpoint": state.0.model.as_ref().map(|m| m.id.clone()),
        "vocabulary": state.0.model.as_ref().map(|m| [m.vocab().low(), m.vocab().high()]),
        "workers": state.0.workers.available_permits(),
    }))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipRequest {
    pub count: usize,
    #[serde(default = "default_clip_measures")]
    pub measures: u32,
    pub key: Option<String>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
}

fn default_clip_measures() -> u32 {
    8
}

fn check_measures(measures: u32) -> ApiResult<()> {
    if (MIN_SECTION_MEASURES..=MAX_SECTION_MEASURES).contains(&measures) {
        Ok(())
    } else {
        Err(ApiError::BadRequest(format!(
            "measures must be {MIN_SECTION_MEASURES} to {MAX_SECTION_MEASURES}, got {measures}"
        )))
    }
}

/// Server config with request overrides applied and validated.
fn request_config(
    base: &StudioConfig,
    key: Option<&str>,
    temperature: Option<f64>,
    seed: Option<u64>,
) -> ApiResult<StudioConfig> {
    let mut config = base.clone();
    if let Some(k) = key {
        let key: Key = k.parse().map_err(|e| ApiError::BadRequest(format!("key: {e}")))?;
        config.generation.key = Some(key);
    }
    if let Some(t) = temperature {
        config.generation.temperature = t;
    }
    if let Some(s) = seed {
        config.generation.seed = s;
    }
    config
        .generation
        .validate()
        .map_err(|e| ApiError::BadRequest(e.to_string()))?;
    Ok(config)
}

async fn create_clips(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: ClipRequest = parse_body(&body)?;
    let model = state.model()?;
    if req.count == 0 || req.count > MAX_CLIPS_PER_REQUEST {
        return Err(ApiError::BadRequest(format!(
            "count must be 1 to {MAX_CLIPS_PER_REQUEST}, got {}",
            req.count
        )));
    }
    check_measures(req.measures)?;
    let config = request_config(&state.0.config, req.key.as_deref(), req.temperature, req.seed)?;
    let request = serde_json::to_value(&req).expect("serializable");
    let job = state.spawn_job(JobKind::Clips, request, move |state| {
        let clips = make_clips(&state.0.ws, &model, req.count, req.measures, &config).map_err(|e| e.to_string())?;
        Ok(clips.into_iter().map(|c| c.id).collect())
    });
    Ok(accepted(job))
}

async fn list_clips(State(state): State<AppState>) -> ApiResult<Json<Vec<ClipMeta>>> {
    let ws = &state.0.ws;
    let mut out = Vec::new();
    for id in ws.clip_ids()? {
        out.push(ws.load_clip(&id)?.meta);
    }
    Ok(Json(out))
}

/// One rectangle of a piano roll.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RollNote {
    pub channel: ChannelId,
    pub pitch: u8,
    pub onset_step: u32,
    pub duration_steps: u32,
}

pub fn piano_roll(score: &Score) -> Vec<RollNote> {
    ChannelId::ALL
        .iter()
        .flat_map(|&channel| {
            score.channel(channel).iter().map(move |n| RollNote {
                channel,
                pitch: n.pitch.value(),
                onset_step: n.onset,
                duration_steps: n.duration,
            })
        })
        .collect()
}

async fn clip_file(State(state): State<AppState>, UrlPath(file): UrlPath<String>) -> ApiResult<Response> {
    let (id, ext) = split_file(&file)?;
    let ws = &state.0.ws;
    if !ws.clip_exists(id) {
        return Err(ApiError::NotFound(format!("unknown clip {id}")));
    }
    match ext {
        "mid" => Ok(midi_response(read_artifact(&ws.clip_path(id, "mid")?)?)),
        _ => {
            let clip = ws.load_clip(id)?;
            let score = decode(&clip.sequence.symbols).map_err(|e| ApiError::Internal(e.to_string()))?;
            Ok(Json(piano_roll(&score)).into_response())
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
pub struct SeedRequest {
    pub clip_id: String,
    pub label: String,
}

fn check_label(label: &str) -> ApiResult<char> {
    let mut chars = label.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) if c.is_ascii_uppercase() => Ok(c),
        _ => Err(ApiError::BadRequest(format!("label must be one letter A-Z, got {label:?}"))),
    }
}

async fn list_seeds(State(state): State<AppState>) -> ApiResult<Json<Vec<SeedMark>>> {
    Ok(Json(state.0.ws.seeds()?))
}

async fn mark_seed(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: SeedRequest = parse_body(&body)?;
    check_label(&req.label)?;
    let _guard = state.0.seeds.lock().unwrap();
    let added = state.0.ws.mark_seed(&req.clip_id, &req.label)?;
    let code = if added { StatusCode::CREATED } else { StatusCode::OK };
    Ok((code, Json(state.0.ws.seeds()?)).into_response())
}

async fn unmark_seed(State(state): State<AppState>, body: Bytes) -> ApiResult<Json<Vec<SeedMark>>> {
    let req: SeedRequest = parse_body(&body)?;
    let _guard = state.0.seeds.lock().unwrap();
    if !state.0.ws.unmark_seed(&req.clip_id, &req.label)? {
        return Err(ApiError::NotFound(format!("{} is not marked as {}", req.clip_id, req.label)));
    }
    Ok(Json(state.0.ws.seeds()?))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SongRequest {
    pub template: String,
    #[serde(default)]
    pub seeds: BTreeMap<String, String>,
    pub tempo: Option<f64>,
    /// Default drum pattern; `"none"` for no drums.
    pub drums: Option<String>,
    pub measures: Option<u32>,
    pub key: Option<String>,
    pub temperature: Option<f64>,
    pub seed: Option<u64>,
}

async fn create_song(State(state): State<AppState>, body: Bytes) -> ApiResult<Response> {
    let req: SongRequest = parse_body(&body)?;
    let model = state.model()?;
    let mut config = request_config(&state.0.config, req.key.as_deref(), req.temperature, req.seed)?;
    if let Some(tempo) = req.tempo {
        if !(tempo > 0.0 && tempo.is_finite()) {
            return Err(ApiError::BadRequest(format!("tempo must be positive, got {tempo}")));
        }
        config.tempo_bpm = tempo;
    }
    if let Some(drums) = &req.drums {
        config.drums = (drums != "none").then(|| drums.clone());
    }
    if let Some(m) = req.measures {
        check_measures(m)?;
        config.section_measures = m;
    }
    let defaults = TemplateDefaults {
        measures: config.section_measures,
        drums: config.drums.clone(),
    };
    parse_template(&req.template, &defaults).map_err(|e| ApiError::BadRequest(e.to_string()))?;
    let mut seeds = BTreeMap::new();
    for (label, clip) in &req.seeds {
        let c = check_label(label)?;
        if !state.0.ws.clip_exists(clip) {
            return Err(ApiError::NotFound(format!("unknown seed clip {clip} for {label}")));
        }
        seeds.insert(c, clip.clone());
    }
    let request = serde_json::to_value(&req).expect("serializable");
    let job = state.spawn_job(JobKind::Song, request, move |state| {
        let song = compose(&state.0.ws, &model, &req.template, &seeds, &config).map_err(|e| e.to_string())?;
        Ok(vec![song.id])
    });
    Ok(accepted(job))
}

async fn list_songs(State(state): State<AppState>) -> ApiResult<Json<Vec<String>>> {
    Ok(Json(state.0.ws.song_ids()?))
}

async fn song_file(State(state): State<AppState>, UrlPath(file): UrlPath<String>) -> ApiResult<Response> {
    let (id, ext) = split_file(&file)?;
    let ws = &state.0.ws;
    let manifest = ws.load_song_manifest(id)?;
    match ext {
        "mid" => Ok(midi_response(read_artifact(&ws.song_path(id, "mid")?)?)),
        _ => Ok(Json(manifest).into_response()),
    }
}

async fn get_job(State(state): State<AppState>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<Job>> {
    state
        .job(&id)
        .map(Json)
        .ok_or_else(|| ApiError::NotFound(format!("unknown job {id}")))
}
