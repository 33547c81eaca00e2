//! Application state, routes and handlers.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use axum::extract::{DefaultBodyLimit, FromRequest, Multipart, Path as UrlPath, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use dashmap::DashMap;
use serde::Deserialize;
use serde_json::{json, Value};
use visitprep_core::engine::{Command, EventSink, SystemClock};
use visitprep_core::eventlog::EventStore;
use visitprep_core::ingest::{DefaultExtractor, SegmentationConfig};
use visitprep_core::interview::Topic;
use visitprep_core::jobs::{IndexStore, IngestContext, IngestRequest, JobRegistry, DEFAULT_WORKERS};
use visitprep_core::{SessionEngine, SessionState};

use crate::config::{Config, ConfigError};
use crate::error::ApiError;

const MAX_UPLOAD_BYTES: usize = 512 * 1024 * 1024;

pub struct AppState {
    pub engine: SessionEngine,
    pub events: EventStore,
    pub store: Arc<IndexStore>,
    pub jobs: JobRegistry,
    sessions: DashMap<String, Arc<Mutex<SessionState>>>,
    chunking: SegmentationConfig,
    uploads: PathBuf,
    admin_token: Option<String>,
}

impl AppState {
    /// Opens the data directory and builds providers. Call outside an async
    /// context when HTTP providers are configured.
    pub fn build(config: &Config, admin_token: Option<String>) -> Result<Self, ConfigError> {
        config.validate()?;
        let storage = |e: &dyn std::fmt::Display| ConfigError::Invalid(format!("data directory: {e}"));
        let store = Arc::new(IndexStore::open(config.index_dir()).map_err(|e| storage(&e))?);
        let events = EventStore::open(config.sessions_dir()).map_err(|e| storage(&e))?;
        let embedder = config.embedder()?;
        if let Some(index) = store.live().current() {
            let built_with = &index.manifest().provider_tag;
            if *built_with != embedder.provider_tag() {
                tracing::warn!(%built_with, current = %embedder.provider_tag(), "index was built with a different embedder; re-ingest before serving");
            }
        }
        let engine = SessionEngine::new(
            store.live().clone(),
            embedder.clone(),
            config.gateway()?,
            config.engine_settings(),
            Arc::new(SystemClock),
        );
        let ctx = IngestContext {
            extractor: Arc::new(DefaultExtractor),
            embedder,
            store: store.clone(),
        };
        Ok(Self {
            engine,
            events,
            store,
            jobs: JobRegistry::new(Arc::new(ctx), DEFAULT_WORKERS),
            sessions: DashMap::new(),
            chunking: config.chunking(),
            uploads: config.uploads_dir(),
            admin_token: admin_token.filter(|t| !t.is_empty()),
        })
    }

    fn session(&self, id: &str) -> Result<Arc<Mutex<SessionState>>, ApiError> {
        if let Some(s) = self.sessions.get(id) {
            return Ok(s.clone());
        }
        let entry = self
            .sessions
            .entry(id.to_owned())
            .or_try_insert_with(|| self.events.replay(id).map(|s| Arc::new(Mutex::new(s))))?;
        Ok(entry.clone())
    }

    /// Runs `f` on the session while holding its lock; events go to the log.
    fn with_session<T>(
        &self,
        id: &str,
        f: impl FnOnce(&SessionEngine, &mut SessionState, &mut dyn EventSink) -> Result<T, ApiError>,
    ) -> Result<T, ApiError> {
        let session = self.session(id)?;
        let mut state = session.lock().unwrap_or_else(|e| e.into_inner());
        f(&self.engine, &mut state, &mut self.events.sink())
    }

    fn run(&self, id: &str, command: Command) -> Result<Value, ApiError> {
        self.with_session(id, |engine, state, sink| {
            engine.execute(state, command, sink)?;
            Ok(session_view(state))
        })
    }

    fn authorize(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        let Some(expected) = &self.admin_token else {
            return Err(ApiError::new(
                StatusCode::FORBIDDEN,
                "AdminDisabled",
                "admin endpoints are disabled; set VISITPREP_ADMIN_TOKEN to enable them",
            ));
        };
        let given = headers
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        match given {
            Some(token) if token.as_bytes() == expected.as_bytes() => Ok(()),
            _ => Err(ApiError::new(
                StatusCode::UNAUTHORIZED,
                "Unauthorized",
                "missing or wrong bearer token",
            )),
        }
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/health", get(health))
        .route("/api/sessions", post(create_session))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/topics", post(select_topics))
        .route("/api/sessions/{id}/responses", post(submit_response))
        .route("/api/sessions/{id}/panel", get(get_panel))
        .route("/api/sessions/{id}/panel/refresh", post(refresh_panel))
        .route("/api/sessions/{id}/reflection", post(begin_reflection))
        .route("/api/sessions/{id}/journey", post(request_journey))
        .route("/api/sessions/{id}/narrative", axum::routing::put(edit_narrative))
        .route("/api/sessions/{id}/narrative/confirm", post(confirm_narrative))
        .route(
            "/api/sessions/{id}/questions",
            get(get_questions).post(generate_questions),
        )
        .route("/api/sessions/{id}/close", post(close_session))
        .route(
            "/api/admin/books",
            post(create_book).layer(DefaultBodyLimit::max(MAX_UPLOAD_BYTES)),
        )
        .route("/api/admin/ingest-jobs/{job_id}", get(get_job))
        .with_state(state)
}

/// JSON body extractor whose rejections use the standard error body.
#[derive(FromRequest)]
#[from_request(via(Json), rejection(ApiError))]
struct Body<T>(T);

type Shared = State<Arc<AppState>>;

/// Domain calls block (file I/O, provider requests), so they leave the
/// async workers.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ApiError> + Send + 'static) -> Result<T, ApiError> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::internal(format!("worker failed: {e}")))?
}

fn topic_menu() -> Value {
    Topic::MENU
        .iter()
        .map(|t| json!({ "topic_id": t.id(), "display_name": t.display_name() }))
        .collect()
}

pub fn session_view(s: &SessionState) -> Value {
    json!({
        "session_id": s.session_id,
        "created_at": s.created_at,
        "stage": s.stage,
        "stage_history": s.stage_history,
        "selected_topics": s.selected_topics.iter().map(|t| json!({
            "topic_id": t.topic.id(),
            "name": t.name(),
        })).collect::<Vec<_>>(),
        "transcript": s.transcript,
        "elicitation_turns": s.elicitation_turns(),
        "min_elicit_turns": s.min_elicit_turns,
        "knowledge_gaps": s.knowledge_gaps,
        "panel": s.panel,
        "panel_refreshed": s.panel_refreshed,
        "reflection": s.reflection.as_ref().map(|r| json!({
            "prompts": r.prompts,
            "answers": r.answers,
            "unanswered": r.unanswered(),
            "notes": r.notes,
        })),
        "narrative": s.narrative,
        "questions": s.questions.as_ref().map(|q| q.to_api_json()),
    })
}

async fn health(State(app): Shared) -> Json<Value> {
    let index = app.store.live().current().map(|i| {
        let m = i.manifest();
        json!({
            "index_id": m.index_id,
            "book_ids": m.book_ids,
            "segments": m.segment_count,
            "provider": m.provider_tag,
        })
    });
    Json(json!({ "status": "ok", "index": index }))
}

async fn create_session(State(app): Shared) -> Result<Response, ApiError> {
    let view = blocking(move || {
        let mut sink = app.events.sink();
        let state = app.engine.start_session(&mut sink)?;
        let mut view = session_view(&state);
        app.sessions
            .insert(state.session_id.clone(), Arc::new(Mutex::new(state)));
        view["topics"] = topic_menu();
        Ok(view)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn get_session(State(app): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    blocking(move || app.with_session(&id, |_, s, _| Ok(session_view(s))))
        .await
        .map(Json)
}

#[derive(Deserialize)]
struct TopicsBody {
    topic_ids: Vec<String>,
    #[serde(default)]
    other_label: Option<String>,
}

async fn select_topics(
    State(app): Shared,
    UrlPath(id): UrlPath<String>,
    Body(body): Body<TopicsBody>,
) -> Result<Json<Value>, ApiError> {
    let command = Command::SelectTopics {
        topic_ids: body.topic_ids,
        other_label: body.other_label,
    };
    blocking(move || app.run(&id, command)).await.map(Json)
}

#[derive(Deserialize)]
struct TextBody {
    text: String,
}

async fn submit_response(
    State(app): Shared,
    UrlPath(id): UrlPath<String>,
    Body(body): Body<TextBody>,
) -> Result<Json<Value>, ApiError> {
    blocking(move || app.run(&id, Command::SubmitResponse { text: body.text }))
        .await
        .map(Json)
}

fn not_ready(s: &SessionState, what: &str) -> ApiError {
    ApiError::new(
        StatusCode::CONFLICT,
        "WrongStage",
        format!("no {what} yet in stage {}", s.stage),
    )
    .with_details(json!({ "stage": s.stage, "action": format!("read the {what}") }))
}

async fn get_panel(State(app): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    blocking(move || {
        app.with_session(&id, |_, s, _| {
            let panel = s.panel.as_ref().ok_or_else(|| not_ready(s, "knowledge panel"))?;
            Ok(json!({
                "panel": panel,
                "knowledge_gaps": s.knowledge_gaps,
                "refreshed": s.panel_refreshed,
            }))
        })
    })
    .await
    .map(Json)
}

async fn refresh_panel(State(app): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    blocking(move || app.run(&id, Command::RefreshPanel)).await.map(Json)
}

async fn begin_reflection(State(app): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    blocking(move || app.run(&id, Command::BeginReflection)).await.map(Json)
}

async fn request_journey(State(app): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    blocking(move || app.run(&id, Command::RequestJourney)).await.map(Json)
}

async fn edit_narrative(
    State(app): Shared,
    UrlPath(id): UrlPath<String>,
    Body(body): Body<TextBody>,
) -> Result<Json<Value>, ApiError> {
    blocking(move || app.run(&id, Command::EditNarrative { text: body.text }))
        .await
        .map(Json)
}

/// Confirms, then generates questions. A generation failure does not undo
/// the confirmation; it is reported in `questions_error` and can be retried
/// with `POST /questions`.
async fn confirm_narrative(State(app): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    blocking(move || {
        app.with_session(&id, |engine, state, sink| {
            engine.execute(state, Command::ConfirmNarrative, sink)?;
            let generated = engine.execute(state, Command::GenerateQuestions, sink);
            let mut view = session_view(state);
            view["questions_error"] = match generated {
                Ok(()) => Value::Null,
                Err(e) => ApiError::from(e).body(),
            };
            Ok(view)
        })
    })
    .await
    .map(Json)
}

async fn generate_questions(State(app): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    blocking(move || app.run(&id, Command::GenerateQuestions))
        .await
        .map(Json)
}

async fn get_questions(State(app): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    blocking(move || {
        app.with_session(&id, |_, s, _| {
            s.questions
                .as_ref()
                .map(|q| q.to_api_json())
                .ok_or_else(|| not_ready(s, "visit questions"))
        })
    })
    .await
    .map(Json)
}

async fn close_session(State(app): Shared, UrlPath(id): UrlPath<String>) -> Result<Json<Value>, ApiError> {
    blocking(move || app.run(&id, Command::Close)).await.map(Json)
}

#[derive(Deserialize)]
struct BookPathBody {
    book_id: String,
    path: PathBuf,
}

/// Accepts either JSON `{book_id, path}` naming a folder on the server, or a
/// multipart form with a `book_id` field and one file part per page.
async fn create_book(State(app): Shared, headers: HeaderMap, request: Request) -> Result<Response, ApiError> {
    app.authorize(&headers)?;
    let content_type = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .unwrap_or("");
    let (book_id, source_dir) = if content_type.starts_with("multipart/form-data") {
        let multipart = Multipart::from_request(request, &())
            .await
            .map_err(|e| ApiError::invalid(e.body_text()))?;
        receive_upload(&app.uploads, multipart).await?
    } else {
        let Body(body) = Body::<BookPathBody>::from_request(request, &()).await?;
        if !body.path.is_dir() {
            return Err(ApiError::invalid(format!(
                "{} is not a directory on the server",
                body.path.display()
            )));
        }
        (body.book_id, body.path)
    };
    let req = IngestRequest {
        book_id,
        source_dir,
        config: app.chunking,
    };
    let job = blocking(move || app.jobs.submit(req).map_err(ApiError::from)).await?;
    Ok((StatusCode::ACCEPTED, Json(job)).into_response())
}

async fn receive_upload(uploads: &Path, mut multipart: Multipart) -> Result<(String, PathBuf), ApiError> {
    let dir = uploads.join(uuid::Uuid::new_v4().to_string());
    let io = |e: std::io::Error| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "StorageError", e.to_string());
    tokio::fs::create_dir_all(&dir).await.map_err(io)?;
    let mut book_id = None;
    let mut files = 0;
    while let Some(field) = multipart
        .next_field()
        .await
        .map_err(|e| ApiError::invalid(e.body_text()))?
    {
        if field.name() == Some("book_id") {
            book_id = Some(field.text().await.map_err(|e| ApiError::invalid(e.body_text()))?);
            continue;
        }
        // Browsers send folder uploads as `folder/3.pdf`; keep the base name only.
        let Some(name) = field
            .file_name()
            .and_then(|n| Path::new(n).file_name())
            .map(|n| n.to_owned())
        else {
            continue;
        };
        let bytes = field.bytes().await.map_err(|e| ApiError::invalid(e.body_text()))?;
        tokio::fs::write(dir.join(name), bytes).await.map_err(io)?;
        files += 1;
    }
    let book_id = book_id.ok_or_else(|| ApiError::invalid("multipart upload needs a `book_id` field"))?;
    if files == 0 {
        return Err(ApiError::invalid("multipart upload contained no files"));
    }
    Ok((book_id, dir))
}

async fn get_job(
    State(app): Shared,
    headers: HeaderMap,
    UrlPath(job_id): UrlPath<String>,
) -> Result<Response, ApiError> {
    app.authorize(&headers)?;
    let job = app
        .jobs
        .get(&job_id)
        .ok_or_else(|| ApiError::not_found("JobNotFound", format!("ingest job `{job_id}` not found")))?;
    Ok(Json(job).into_response())
}
