use std::convert::Infallible;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{FromRequestParts, Multipart, Path, Query, State};
use axum::http::header::{AUTHORIZATION, CONTENT_DISPOSITION, CONTENT_TYPE};
use axum::http::request::Parts;
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::Json;
use futures::stream::{self, BoxStream, Stream, StreamExt};
use serde::{Deserialize, Serialize};

use panelsim_core::scheduler::{RunEnd, RunManifest};
use panelsim_core::store::{PurgeReport, RunMeta, UploadKind, UploadMeta};
use panelsim_core::survey::{parse_survey_document, SurveyFormat};
use panelsim_core::{ExportFormat, MetricsSnapshot, RunState, ValidationReport};

use crate::error::ApiError;
use crate::manager::StartRequest;
use crate::AppState;

type AppS = State<Arc<AppState>>;

/// The authenticated caller.
pub struct AuthUser(pub String);

impl FromRequestParts<Arc<AppState>> for AuthUser {
    type Rejection = ApiError;

    async fn from_request_parts(parts: &mut Parts, state: &Arc<AppState>) -> Result<Self, ApiError> {
        let token = parts
            .headers
            .get(AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(ApiError::Unauthorized)?;
        Ok(AuthUser(state.credentials.authenticate(token.trim())?))
    }
}

#[derive(Debug, Deserialize)]
pub struct Credentials {
    pub login: String,
    pub secret: String,
}

pub async fn register(State(app): AppS, Json(c): Json<Credentials>) -> Result<impl IntoResponse, ApiError> {
    let user_id = app.credentials.register(&c.login, &c.secret)?;
    Ok((StatusCode::CREATED, Json(serde_json::json!({ "user_id": user_id }))))
}

pub async fn login(State(app): AppS, Json(c): Json<Credentials>) -> Result<impl IntoResponse, ApiError> {
    Ok(Json(app.credentials.login(&c.login, &c.secret)?))
}

const POPULATION_FORMATS: [&str; 4] = ["csv", "delimited-table", "json", "structured-text"];

/// Multipart fields: `kind` (survey or population), `format`, and `file`.
pub async fn upload(
    State(app): AppS,
    AuthUser(user): AuthUser,
    mut form: Multipart,
) -> Result<(StatusCode, Json<UploadMeta>), ApiError> {
    let (mut kind, mut format, mut file) = (None, None, None);
    while let Some(field) = form.next_field().await.map_err(|e| ApiError::BadRequest(e.to_string()))? {
        let name = field.name().unwrap_or_default().to_owned();
        let bytes = field.bytes().await.map_err(|e| ApiError::BadRequest(e.to_string()))?;
        match name.as_str() {
            "kind" => kind = Some(String::from_utf8_lossy(&bytes).trim().to_owned()),
            "format" => format = Some(String::from_utf8_lossy(&bytes).trim().to_owned()),
            "file" => file = Some(bytes.to_vec()),
            _ => {}
        }
    }
    let mut report = ValidationReport::new();
    let kind = match kind.as_deref() {
        Some("survey") => Some(UploadKind::Survey),
        Some("population") => Some(UploadKind::Population),
        _ => {
            report.push("kind", "must be survey or population");
            None
        }
    };
    if format.is_none() {
        report.push("format", "required");
    }
    if file.is_none() {
        report.push("file", "required");
    }
    let (Some(kind), Some(format), Some(file)) = (kind, format, file) else {
        return Err(ApiError::Invalid(report));
    };
    match kind {
        UploadKind::Survey => {
            let parsed: SurveyFormat = format.parse().map_err(|e: String| ApiError::invalid("format", e))?;
            if let Err(e) = parse_survey_document(&file, parsed) {
                let mut r = ValidationReport::new();
                for pe in e.errors {
                    let subject = if pe.position == 0 {
                        "file".to_owned()
                    } else {
                        format!("line {}", pe.position)
                    };
                    r.push(subject, pe.message);
                }
                return Err(ApiError::Invalid(r));
            }
        }
        UploadKind::Population if !POPULATION_FORMATS.contains(&format.as_str()) => {
            return Err(ApiError::invalid("format", format!("unknown population format {format:?}")));
        }
        UploadKind::Population => {}
    }
    let meta = app.runs.store().save_upload(&user, kind, &format, file)?;
    Ok((StatusCode::CREATED, Json(meta)))
}

/// What clients see of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunView {
    pub run_id: String,
    pub user_id: String,
    pub state: RunState,
    pub created_at: u64,
    pub config_hash: String,
    pub directive_version: String,
    #[serde(default)]
    pub error: Option<String>,
    /// Stored answers.
    pub completed: usize,
    #[serde(default)]
    pub total_jobs: Option<usize>,
    #[serde(default)]
    pub uncompleted: Option<usize>,
    #[serde(default)]
    pub end: Option<RunEnd>,
}

fn view(app: &AppState, meta: RunMeta) -> Result<RunView, ApiError> {
    let store = app.runs.store();
    let manifest = store.latest_manifest(&meta.user_id, &meta.run_id)?;
    let completed = store.answered_keys(&meta.user_id, &meta.run_id)?.len();
    Ok(RunView {
        completed,
        total_jobs: manifest.as_ref().map(|m| m.total_jobs),
        uncompleted: manifest.as_ref().map(|m| m.uncompleted.len()),
        end: manifest.and_then(|m| m.end),
        run_id: meta.run_id,
        user_id: meta.user_id,
        state: meta.state,
        created_at: meta.created_at,
        config_hash: meta.config_hash,
        directive_version: meta.directive_version,
        error: meta.error,
    })
}

pub async fn start_run(
    State(app): AppS,
    AuthUser(user): AuthUser,
    body: Bytes,
) -> Result<(StatusCode, Json<RunView>), ApiError> {
    let req: StartRequest = serde_json::from_slice(&body).map_err(|e| ApiError::invalid("body", e.to_string()))?;
    let meta = app.runs.start(&user, req)?;
    Ok((StatusCode::ACCEPTED, Json(view(&app, meta)?)))
}

pub async fn list_runs(State(app): AppS, AuthUser(user): AuthUser) -> Result<Json<Vec<RunView>>, ApiError> {
    let runs = app.runs.store().list_runs(&user);
    Ok(Json(runs.into_iter().map(|m| view(&app, m)).collect::<Result<_, _>>()?))
}

pub async fn get_run(State(app): AppS, AuthUser(user): AuthUser, Path(run): Path<String>) -> Result<Json<RunView>, ApiError> {
    let meta = app.runs.owned(&user, &run)?;
    Ok(Json(view(&app, meta)?))
}

pub async fn cancel_run(
    State(app): AppS,
    AuthUser(user): AuthUser,
    Path(run): Path<String>,
) -> Result<(StatusCode, Json<RunView>), ApiError> {
    let meta = app.runs.cancel(&user, &run)?;
    Ok((StatusCode::ACCEPTED, Json(view(&app, meta)?)))
}

pub async fn resume_run(
    State(app): AppS,
    AuthUser(user): AuthUser,
    Path(run): Path<String>,
) -> Result<(StatusCode, Json<RunView>), ApiError> {
    let meta = app.runs.resume(&user, &run)?;
    Ok((StatusCode::ACCEPTED, Json(view(&app, meta)?)))
}

/// Snapshot of a run with no live hub, rebuilt from its stored manifest.
fn stored_snapshot(meta: &RunMeta, manifest: Option<RunManifest>) -> MetricsSnapshot {
    let (total, completed, exhausted) = match &manifest {
        Some(m) => (m.total_jobs as u64, m.completed.len() as u64, m.exhausted().count() as u64),
        None => (0, 0, 0),
    };
    MetricsSnapshot {
        run_id: meta.run_id.clone(),
        total_jobs: total,
        completed,
        failed_exhausted: exhausted,
        pending: total - completed - exhausted,
        terminal: !meta.state.is_active(),
        ..MetricsSnapshot::default()
    }
}

pub async fn stream_metrics(
    State(app): AppS,
    AuthUser(user): AuthUser,
    Path(run): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let meta = app.runs.owned(&user, &run)?;
    let snapshots: BoxStream<'static, MetricsSnapshot> = match app.runs.metrics().subscribe(&run) {
        Ok(s) => s.boxed(),
        Err(_) => {
            let manifest = app.runs.store().latest_manifest(&user, &run)?;
            stream::once(futures::future::ready(stored_snapshot(&meta, manifest))).boxed()
        }
    };
    let events = snapshots.map(|s| {
        let data = serde_json::to_string(&s).unwrap_or_default();
        Ok(Event::default().event("snapshot").data(data))
    });
    Ok(Sse::new(events).keep_alive(KeepAlive::default()))
}

#[derive(Debug, Deserialize)]
pub struct ResultsQuery {
    #[serde(default)]
    pub format: Option<String>,
}

pub async fn download_results(
    State(app): AppS,
    AuthUser(user): AuthUser,
    Path(run): Path<String>,
    Query(q): Query<ResultsQuery>,
) -> Result<impl IntoResponse, ApiError> {
    app.runs.owned(&user, &run)?;
    let format: ExportFormat = q
        .format
        .as_deref()
        .unwrap_or("csv")
        .parse()
        .map_err(|e: String| ApiError::invalid("format", e))?;
    let bytes = app.runs.store().export(&user, &run, format)?;
    Ok((
        [
            (CONTENT_TYPE, format.content_type().to_owned()),
            (CONTENT_DISPOSITION, format!("attachment; filename=\"{}\"", format.file_name())),
        ],
        bytes,
    ))
}

pub async fn purge(State(app): AppS, AuthUser(user): AuthUser) -> Result<Json<PurgeReport>, ApiError> {
    Ok(Json(app.runs.purge(&user).await?))
}
